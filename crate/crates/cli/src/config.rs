//! Run configuration: strict JSON with documented defaults, `--set`
//! overrides, and validation that reports every problem at once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use mfg_core::analysis::SweepSetup;
use mfg_core::grid::{Grid, SpaceTimeGrid};
use mfg_core::measure::GridDensity;
use mfg_core::model::{CostFamily, ModelSpec};
use mfg_core::pde::HamiltonianScheme;
use mfg_core::tree::{CommonNoiseTree, FixedPointConfig};
use mfg_core::variational::{FdConfig, VariationalMode};
use mfg_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `lq`, `anharmonic` or `null`.
    pub family: String,
    /// Family parameters: `q`, `kappa` (lq); `c`, `kappa` (anharmonic); none (null).
    pub parameters: BTreeMap<String, f64>,
    pub sigma: f64,
    pub horizon: f64,
    /// Common-noise intensity for `solve-eps` and `nash-gap`.
    pub eps: f64,
    pub initial_law: InitialLaw,
    /// Monte-Carlo probes used by the assumption checks.
    pub assumption_probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub xmin: f64,
    pub xmax: f64,
    pub nx: usize,
    pub nt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    pub depth: usize,
    /// Fine steps per coarse step; `null` means nt / depth.
    pub substeps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointSection {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub scheme: HamiltonianScheme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    /// Closed form for lq, finite-difference sub-games otherwise.
    Auto,
    SubgameFd,
    LqClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationalSection {
    pub n_particles: usize,
    pub n_common: usize,
    pub fd_delta: f64,
    pub coarse_steps: usize,
    pub mode: ModeChoice,
    /// Particles written to CSV and probed by `gaussianity`.
    pub probe_particles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub eps: Vec<f64>,
    /// ε of the control run that calibrates the discretisation floor.
    pub floor_eps: f64,
    /// Initial-law shifts for `sweep stability`.
    pub shifts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub tree: TreeSection,
    pub fixed_point: FixedPointSection,
    pub variational: VariationalSection,
    pub sweep: SweepSection,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection {
                family: "anharmonic".into(),
                parameters: default_parameters("anharmonic"),
                sigma: 0.5,
                horizon: 1.0,
                eps: 0.1,
                initial_law: InitialLaw { mean: 1.0, std: 0.5 },
                assumption_probes: 2000,
            },
            grid: GridSection {
                xmin: -5.0,
                xmax: 7.0,
                nx: 300,
                nt: 32,
            },
            tree: TreeSection {
                depth: 8,
                substeps: None,
            },
            fixed_point: FixedPointSection {
                damping: 0.5,
                tol: 1e-8,
                max_iters: 200,
                scheme: HamiltonianScheme::Linearized,
            },
            variational: VariationalSection {
                n_particles: 100,
                n_common: 2000,
                fd_delta: 1e-2,
                coarse_steps: 8,
                mode: ModeChoice::Auto,
                probe_particles: 5,
            },
            sweep: SweepSection {
                eps: vec![0.4, 0.2, 0.1, 0.05],
                floor_eps: 1e-3,
                shifts: vec![0.2, 0.1, 0.05],
            },
            seed: 7,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn default_parameters(family: &str) -> BTreeMap<String, f64> {
    let pairs: &[(&str, f64)] = match family {
        "lq" => &[("q", 1.0), ("kappa", 0.5)],
        "anharmonic" => &[("c", 0.5), ("kappa", 0.5)],
        _ => &[],
    };
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Default configuration as pretty JSON (shown in `--help`).
pub fn defaults_json() -> String {
    let mut v = serde_json::to_value(RunConfig::default()).expect("plain data");
    v["tree"]["substeps"] = Value::Null;
    serde_json::to_string_pretty(&v).expect("plain data")
}

/// Record keys of `user` that the default document does not know about.
/// `model.parameters` is a free map checked later against the family.
fn unknown_keys(user: &Value, known: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(k)) = (user, known) else {
        return;
    };
    for (key, val) in u {
        let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match k.get(key) {
            None => out.push(format!("unknown key `{here}`")),
            Some(_) if here == "model.parameters" => {}
            Some(kv) => unknown_keys(val, kv, &here, out),
        }
    }
}

fn merge(base: &mut Value, user: &Value, path: &str) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) if path != "model.parameters" => {
            for (key, val) in u {
                let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                // unknown keys were already reported
                if let Some(slot) = b.get_mut(key) {
                    merge(slot, val, &here);
                }
            }
        }
        (b, u) => *b = u.clone(),
    }
}

/// Apply `key.path=value`; the value is parsed as JSON, falling back to a string.
fn apply_set(doc: &mut Value, assignment: &str, problems: &mut Vec<String>) {
    let Some((key, raw)) = assignment.split_once('=') else {
        problems.push(format!("--set `{assignment}` is not of the form key=value"));
        return;
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !slot.is_object() {
            problems.push(format!("--set `{key}`: `{}` is not a section", parts[..i].join(".")));
            return;
        }
        let obj = slot.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return;
        }
        slot = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
}

fn section<T: serde::de::DeserializeOwned>(doc: &Value, key: &str, problems: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value(doc[key].clone()) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("`{key}`: {e}"));
            None
        }
    }
}

/// Parse, merge over defaults, apply overrides and validate.
pub fn parse_config(text: &str, sets: &[String]) -> Result<RunConfig> {
    let mut user: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
    if !user.is_object() {
        return Err(Error::config("config must be a JSON object"));
    }
    let mut problems = Vec::new();
    for s in sets {
        apply_set(&mut user, s, &mut problems);
    }
    let mut doc = serde_json::to_value(RunConfig::default()).expect("plain data");
    unknown_keys(&user, &doc, "", &mut problems);
    // a family switch without parameters takes that family's defaults
    if let Some(f) = user.pointer("/model/family").and_then(Value::as_str) {
        if user.pointer("/model/parameters").is_none() {
            doc["model"]["parameters"] = serde_json::to_value(default_parameters(f)).expect("plain data");
        }
    }
    merge(&mut doc, &user, "");

    let model: Option<ModelSection> = section(&doc, "model", &mut problems);
    let grid: Option<GridSection> = section(&doc, "grid", &mut problems);
    let tree: Option<TreeSection> = section(&doc, "tree", &mut problems);
    let fixed_point: Option<FixedPointSection> = section(&doc, "fixed_point", &mut problems);
    let variational: Option<VariationalSection> = section(&doc, "variational", &mut problems);
    let sweep: Option<SweepSection> = section(&doc, "sweep", &mut problems);
    let seed: Option<u64> = section(&doc, "seed", &mut problems);
    let output_dir: Option<PathBuf> = section(&doc, "output_dir", &mut problems);
    let cfg = match (model, grid, tree, fixed_point, variational, sweep, seed, output_dir) {
        (Some(model), Some(grid), Some(tree), Some(fixed_point), Some(variational), Some(sweep), Some(seed), Some(output_dir)) => {
            Some(RunConfig {
                model,
                grid,
                tree,
                fixed_point,
                variational,
                sweep,
                seed,
                output_dir,
            })
        }
        _ => None,
    };
    if let Some(c) = &cfg {
        c.validate_into(&mut problems);
    }
    match cfg {
        Some(c) if problems.is_empty() => Ok(c),
        _ => Err(Error::config(problems.join("; "))),
    }
}

pub fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, sets)
}

impl RunConfig {
    pub fn substeps(&self) -> usize {
        self.tree
            .substeps
            .unwrap_or(self.grid.nt / self.tree.depth.max(1))
    }

    fn validate_into(&self, p: &mut Vec<String>) {
        let m = &self.model;
        let positive = |name: &str, v: f64, p: &mut Vec<String>| {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{name} must be positive (got {v})"));
            }
        };
        let required: &[&str] = match m.family.as_str() {
            "lq" => &["q", "kappa"],
            "anharmonic" => &["c", "kappa"],
            "null" => &[],
            other => {
                p.push(format!("model.family must be lq, anharmonic or null (got `{other}`)"));
                &[]
            }
        };
        if ["lq", "anharmonic", "null"].contains(&m.family.as_str()) {
            for k in m.parameters.keys() {
                if !required.contains(&k.as_str()) {
                    p.push(format!("unknown parameter `model.parameters.{k}` for family {}", m.family));
                }
            }
            for k in required {
                if !m.parameters.contains_key(*k) {
                    p.push(format!("missing parameter `model.parameters.{k}` for family {}", m.family));
                }
            }
            if p.is_empty() {
                if let Err(e) = self.cost().validate() {
                    p.push(e.to_string());
                }
            }
        }
        positive("model.sigma", m.sigma, p);
        positive("model.horizon", m.horizon, p);
        positive("model.initial_law.std", m.initial_law.std, p);
        if !(m.eps >= 0.0 && m.eps.is_finite()) {
            p.push(format!("model.eps must be nonnegative (got {})", m.eps));
        }
        if m.assumption_probes < 100 {
            p.push(format!("model.assumption_probes must be at least 100 (got {})", m.assumption_probes));
        }

        let g = &self.grid;
        if !(g.xmax > g.xmin) {
            p.push(format!("grid.xmax ({}) must exceed grid.xmin ({})", g.xmax, g.xmin));
        }
        if g.nx < 8 {
            p.push(format!("grid.nx must be at least 8 (got {})", g.nx));
        }
        if g.nt < 2 {
            p.push(format!("grid.nt must be at least 2 (got {})", g.nt));
        }
        let d = self.tree.depth;
        if d == 0 || d > mfg_core::tree::MAX_DEPTH {
            p.push(format!("tree.depth must be in 1..={} (got {d})", mfg_core::tree::MAX_DEPTH));
        } else if !g.nt.is_multiple_of(d) {
            p.push(format!("grid.nt = {} is not divisible by tree.depth = {d}", g.nt));
        } else if let Some(k) = self.tree.substeps {
            if k * d != g.nt {
                p.push(format!("tree.depth = {d} times tree.substeps = {k} must equal grid.nt = {}", g.nt));
            }
        }
        // the law must stay well inside the box over the horizon
        let eps_max = self.sweep.eps.iter().copied().fold(m.eps, f64::max);
        let spread = (m.initial_law.std.powi(2) + (m.sigma.powi(2) + eps_max.powi(2)) * m.horizon).sqrt();
        let mean = m.initial_law.mean;
        if spread.is_finite() && g.xmax > g.xmin && (mean - g.xmin < 3.0 * spread || g.xmax - mean < 3.0 * spread) {
            p.push(format!(
                "domain [{}, {}] must extend 3 terminal standard deviations ({:.3}) on each side of the initial mean {mean}",
                g.xmin,
                g.xmax,
                3.0 * spread
            ));
        }

        let f = &self.fixed_point;
        if !(f.damping > 0.0 && f.damping <= 1.0) {
            p.push(format!("fixed_point.damping must be in (0, 1] (got {})", f.damping));
        }
        positive("fixed_point.tol", f.tol, p);
        if f.max_iters == 0 {
            p.push("fixed_point.max_iters must be positive".into());
        }

        let v = &self.variational;
        if v.n_particles == 0 {
            p.push("variational.n_particles must be positive".into());
        }
        if v.n_common < 2 {
            p.push(format!("variational.n_common must be at least 2 (got {})", v.n_common));
        }
        positive("variational.fd_delta", v.fd_delta, p);
        if v.coarse_steps == 0 || !g.nt.is_multiple_of(v.coarse_steps) {
            p.push(format!(
                "variational.coarse_steps = {} must divide grid.nt = {}",
                v.coarse_steps, g.nt
            ));
        }
        if v.mode == ModeChoice::LqClosedForm && m.family != "lq" {
            p.push("variational.mode lq_closed_form needs model.family lq".into());
        }

        let s = &self.sweep;
        if s.eps.is_empty() || s.eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            p.push("sweep.eps must be a nonempty list of positive values".into());
        }
        positive("sweep.floor_eps", s.floor_eps, p);
        if s.shifts.is_empty() || s.shifts.iter().any(|e| *e == 0.0 || !e.is_finite()) {
            p.push("sweep.shifts must be a nonempty list of nonzero values".into());
        }
    }

    pub fn cost(&self) -> CostFamily {
        let par = |k: &str| self.model.parameters.get(k).copied().unwrap_or(f64::NAN);
        match self.model.family.as_str() {
            "lq" => CostFamily::Lq {
                q: par("q"),
                kappa: par("kappa"),
            },
            "anharmonic" => CostFamily::Anharmonic {
                c: par("c"),
                kappa: par("kappa"),
            },
            _ => CostFamily::Null,
        }
    }

    pub fn space(&self) -> Result<Grid> {
        Grid::new(self.grid.xmin, self.grid.xmax, self.grid.nx)
    }

    pub fn space_time(&self) -> Result<SpaceTimeGrid> {
        SpaceTimeGrid::new(self.space()?, self.grid.nt, self.model.horizon)
    }

    pub fn model(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let law = GridDensity::gaussian(self.space()?, m.initial_law.mean, m.initial_law.std)?;
        ModelSpec::new(m.sigma, m.eps, m.horizon, law, self.cost())
    }

    pub fn tree(&self) -> Result<CommonNoiseTree> {
        CommonNoiseTree::new(self.tree.depth, self.substeps())
    }

    pub fn fixed_point(&self) -> FixedPointConfig {
        FixedPointConfig {
            damping: self.fixed_point.damping,
            tol: self.fixed_point.tol,
            max_iters: self.fixed_point.max_iters,
            scheme: self.fixed_point.scheme,
        }
    }

    pub fn fd(&self) -> FdConfig {
        FdConfig {
            delta: self.variational.fd_delta,
            coarse_steps: self.variational.coarse_steps,
            fp: self.fixed_point(),
        }
    }

    pub fn mode(&self) -> VariationalMode {
        match self.variational.mode {
            ModeChoice::SubgameFd => VariationalMode::SubgameFd,
            ModeChoice::LqClosedForm => VariationalMode::LqClosedForm,
            ModeChoice::Auto if self.model.family == "lq" => VariationalMode::LqClosedForm,
            ModeChoice::Auto => VariationalMode::SubgameFd,
        }
    }

    pub fn sweep_setup(&self) -> Result<SweepSetup> {
        Ok(SweepSetup {
            grid: self.space_time()?,
            tree: self.tree()?,
            fp: self.fixed_point(),
            fd: self.fd(),
            mode: self.mode(),
            n_particles: self.variational.n_particles,
            seed: self.seed,
            floor_eps: self.sweep.floor_eps,
        })
    }

    /// SHA-256 of the canonical JSON of the whole configuration.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("plain data"))
    }

    /// Hash of what the 0-MFG solve depends on (model without ε, grid, fixed point).
    pub fn mfg0_key(&self) -> String {
        let mut model = serde_json::to_value(&self.model).expect("plain data");
        model["eps"] = Value::Null;
        model["assumption_probes"] = Value::Null;
        let key = serde_json::json!({ "model": model, "grid": self.grid, "fixed_point": self.fixed_point });
        hex_digest(&serde_json::to_vec(&key).expect("plain data"))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message(e: Error) -> String {
        match e {
            Error::Config { message } => message,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse_config("{}", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.substeps(), 4);
        let lq = parse_config(r#"{"model": {"family": "lq"}}"#, &[]).unwrap();
        assert_eq!(lq.model.parameters["q"], 1.0);
        assert_eq!(lq.mode(), VariationalMode::LqClosedForm);
    }

    #[test]
    fn divisibility_error_names_both_values() {
        let m = message(parse_config(r#"{"grid": {"nt": 30}}"#, &[]).unwrap_err());
        assert!(m.contains("nt = 30") && m.contains("depth = 8"), "{m}");
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let m = message(parse_config(r#"{"model": {"sigma": -0.5}}"#, &[]).unwrap_err());
        assert!(m.contains("model.sigma"), "{m}");
    }

    #[test]
    fn every_problem_is_listed() {
        let m = message(
            parse_config(
                r#"{"modle": 1, "grid": {"nt": 30, "nxx": 3}, "model": {"sigma": -1, "parameters": {"q": 1}}}"#,
                &[],
            )
            .unwrap_err(),
        );
        for needle in ["`modle`", "`grid.nxx`", "nt = 30", "model.sigma", "parameters.q", "parameters.c"] {
            assert!(m.contains(needle), "missing {needle} in {m}");
        }
    }

    #[test]
    fn type_errors_in_several_sections_are_listed() {
        let m = message(parse_config(r#"{"grid": {"nx": "many"}, "seed": -3}"#, &[]).unwrap_err());
        assert!(m.contains("`grid`") && m.contains("`seed`"), "{m}");
    }

    #[test]
    fn set_overrides_keys() {
        let c = parse_config(
            "{}",
            &["model.family=lq".into(), "grid.nx=200".into(), "sweep.eps=[0.2,0.1]".into()],
        )
        .unwrap();
        assert_eq!(c.model.family, "lq");
        assert_eq!(c.model.parameters["kappa"], 0.5);
        assert_eq!(c.grid.nx, 200);
        assert_eq!(c.sweep.eps, vec![0.2, 0.1]);
        assert!(parse_config("{}", &["nonsense".into()]).is_err());
        assert!(parse_config("{}", &["grid.nope=1".into()]).is_err());
    }

    #[test]
    fn narrow_domain_is_rejected() {
        let m = message(parse_config(r#"{"grid": {"xmin": 0, "xmax": 2}}"#, &[]).unwrap_err());
        assert!(m.contains("domain"), "{m}");
    }

    #[test]
    fn hashes_track_relevant_fields() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.model.eps = 0.3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.mfg0_key(), b.mfg0_key());
        b.grid.nx = 301;
        assert_ne!(a.mfg0_key(), b.mfg0_key());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn defaults_round_trip() {
        let c = parse_config(&defaults_json(), &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }
}
