//! Run configuration: one JSON object, dotted-path overrides, and validation
//! that reports every bad field at once.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use quasispec::lattice::{Alpha, QuasiLattice};
use quasispec::operator::TrigPotential;
use quasispec::resonance::{ContourConstant, ThresholdMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Literal(String),
    ContinuedFraction(Vec<u64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeSection {
    pub radius: f64,
    pub q_bound_max: u64,
    pub cluster_q_bound: u64,
    /// K in |s_j| ≤ 4K; by default the largest K for which the cluster
    /// hypothesis holds, at least 1.
    pub cluster_scale: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResonanceSection {
    pub range: f64,
    pub measure_c: f64,
    pub monte_carlo: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSection {
    pub phi: f64,
    pub radius: f64,
    pub r_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionsSection {
    pub k: f64,
    /// Desk-mode resonance threshold for this command; the level-1 defaults
    /// are too coarse for the φ₀ precondition at small k.
    pub t_res: f64,
    pub r1: f64,
    pub r2: f64,
    pub gamma: f64,
    pub phi0: f64,
    pub simple_threshold: f64,
    pub box_size: Option<i64>,
    pub small_box: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleSection {
    pub q: Option<f64>,
    pub n_levels: usize,
    pub r1: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub alpha: AlphaSpec,
    pub mu: f64,
    pub precision: u32,
    pub l: u32,
    pub potential: Option<PathBuf>,
    pub k: Option<f64>,
    pub lambda: Option<f64>,
    pub delta: f64,
    pub tau: f64,
    pub mode: Mode,
    pub t_res: f64,
    pub contour: ContourConstant,
    pub radii: Vec<f64>,
    pub pole_radii: Vec<f64>,
    pub window_half_width: f64,
    pub samples_per_arc: usize,
    pub half_width: Option<f64>,
    pub output: PathBuf,
    pub threads: Option<usize>,
    pub seed: u64,
    pub lattice: LatticeSection,
    pub resonance: ResonanceSection,
    pub spectrum: SpectrumSection,
    pub regions: RegionsSection,
    pub schedule: ScheduleSection,
}

/// Objects built from a validated config.
pub struct Resolved {
    pub lattice: QuasiLattice,
    pub potential: TrigPotential,
}

impl RunConfig {
    /// k, from λ = k^{2l} when only λ is given; 10 when neither is.
    pub fn k(&self) -> f64 {
        match (self.k, self.lambda) {
            (Some(k), _) => k,
            (None, Some(lam)) => lam.powf(1.0 / (2.0 * self.l as f64)),
            (None, None) => 10.0,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.k().powi(2 * self.l as i32))
    }

    pub fn threshold_mode(&self) -> ThresholdMode {
        match self.mode {
            Mode::Desk => ThresholdMode::Desk { t_res: self.t_res },
            Mode::Paper => ThresholdMode::Paper {
                tau: self.tau,
                delta: self.delta,
                contour: self.contour,
            },
        }
    }

    pub fn alpha(&self) -> Result<Alpha, String> {
        let r = match &self.alpha {
            AlphaSpec::Literal(s) if s == "golden" => Alpha::golden(self.precision),
            AlphaSpec::Literal(s) => Alpha::from_decimal(s, self.precision),
            AlphaSpec::ContinuedFraction(t) => Alpha::from_periodic_cf(t, self.precision),
        };
        r.map_err(|e| e.to_string())
    }

    /// Builds α and V. Problems here are configuration problems.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let mut errs = Vec::new();
        let alpha = match self.alpha() {
            Ok(a) => {
                if self.mode == Mode::Paper && a.literal_rational {
                    errs.push("$.alpha: rational literal is not allowed in paper mode".to_string());
                }
                Some(a)
            }
            Err(e) => {
                errs.push(format!("$.alpha: {e}"));
                None
            }
        };
        let potential = match &self.potential {
            None => Some(TrigPotential::zero(1.0)),
            Some(p) => match TrigPotential::from_json_path(p) {
                Ok(v) => Some(v),
                Err(e) => {
                    errs.push(format!("$.potential: {e}"));
                    None
                }
            },
        };
        match (alpha, potential) {
            (Some(a), Some(v)) if errs.is_empty() => Ok(Resolved {
                lattice: QuasiLattice::new(a, self.mu),
                potential: v,
            }),
            _ => Err(ConfigError(errs)),
        }
    }
}

/// Reads the config file (if any), applies `key=value` overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    let mut root = match path {
        None => Value::Object(Map::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(vec![format!("{}: {e}", p.display())]))?;
            serde_json::from_str(&text).map_err(|e| ConfigError(vec![format!("{}: {e}", p.display())]))?
        }
    };
    if !root.is_object() {
        return Err(ConfigError(vec!["$: expected an object".into()]));
    }
    let mut errs = Vec::new();
    for (key, val) in overrides {
        if let Err(e) = set_path(&mut root, key, val.clone()) {
            errs.push(e);
        }
    }
    let cfg = from_value(&root, &mut errs);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError(errs))
    }
}

/// Parses a `key=value` flag; the value is JSON when it parses, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let val = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), val))
}

fn set_path(root: &mut Value, key: &str, val: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("$.{}: not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), val);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

struct Fields<'a> {
    map: Map<String, Value>,
    prefix: String,
    errs: &'a mut Vec<String>,
    known: Vec<&'static str>,
}

impl<'a> Fields<'a> {
    fn new(v: Option<&Value>, prefix: &str, errs: &'a mut Vec<String>) -> Self {
        let map = match v {
            None | Some(Value::Null) => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => {
                errs.push(format!("{prefix}: expected an object"));
                Map::new()
            }
        };
        Fields {
            map,
            prefix: prefix.to_string(),
            errs,
            known: Vec::new(),
        }
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{key}", self.prefix)
    }

    fn raw(&mut self, key: &'static str) -> Option<Value> {
        self.known.push(key);
        self.map.get(key).filter(|v| !v.is_null()).cloned()
    }

    fn bad(&mut self, key: &str, what: &str) {
        let p = self.path(key);
        self.errs.push(format!("{p}: {what}"));
    }

    fn opt_f64(&mut self, key: &'static str, check: fn(f64) -> bool, what: &str) -> Option<f64> {
        let v = self.raw(key)?;
        match v.as_f64() {
            Some(x) if x.is_finite() && check(x) => Some(x),
            _ => {
                self.bad(key, what);
                None
            }
        }
    }

    fn f64(&mut self, key: &'static str, default: f64, check: fn(f64) -> bool, what: &str) -> f64 {
        self.opt_f64(key, check, what).unwrap_or(default)
    }

    fn opt_u64(&mut self, key: &'static str, min: u64, max: u64) -> Option<u64> {
        let v = self.raw(key)?;
        match v.as_u64() {
            Some(x) if (min..=max).contains(&x) => Some(x),
            _ => {
                self.bad(key, &format!("expected an integer in [{min}, {max}]"));
                None
            }
        }
    }

    fn u64(&mut self, key: &'static str, default: u64, min: u64, max: u64) -> u64 {
        self.opt_u64(key, min, max).unwrap_or(default)
    }

    fn f64_list(&mut self, key: &'static str, default: &[f64]) -> Vec<f64> {
        let Some(v) = self.raw(key) else {
            return default.to_vec();
        };
        match v.as_array().and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>()) {
            Some(xs) if xs.iter().all(|x| x.is_finite() && *x > 0.0) => xs,
            _ => {
                self.bad(key, "expected an array of positive numbers");
                default.to_vec()
            }
        }
    }

    fn string(&mut self, key: &'static str) -> Option<String> {
        let v = self.raw(key)?;
        match v {
            Value::String(s) => Some(s),
            _ => {
                self.bad(key, "expected a string");
                None
            }
        }
    }

    fn finish(self) {
        for k in self.map.keys() {
            if !self.known.contains(&k.as_str()) {
                self.errs.push(format!("{}.{k}: unknown field", self.prefix));
            }
        }
    }
}

fn positive(x: f64) -> bool {
    x > 0.0
}

fn nonneg(x: f64) -> bool {
    x >= 0.0
}

fn from_value(root: &Value, errs: &mut Vec<String>) -> RunConfig {
    let mut f = Fields::new(Some(root), "$", errs);
    let alpha = match f.raw("alpha") {
        None => AlphaSpec::Literal("golden".into()),
        Some(Value::String(s)) => AlphaSpec::Literal(s),
        Some(Value::Array(a)) => match a.iter().map(Value::as_u64).collect::<Option<Vec<u64>>>() {
            Some(t) => AlphaSpec::ContinuedFraction(t),
            None => {
                f.bad("alpha", "continued fraction terms must be non-negative integers");
                AlphaSpec::Literal("golden".into())
            }
        },
        Some(_) => {
            f.bad("alpha", "expected \"golden\", a decimal string or an array of terms");
            AlphaSpec::Literal("golden".into())
        }
    };
    let mu = f.f64("mu", 2.0, |x| x >= 1.0, "expected a number >= 1");
    let precision = f.u64("precision", 40, 17, 2000) as u32;
    let l = f.u64("l", 2, 2, 16) as u32;
    let potential = f.string("potential").map(PathBuf::from);
    let k = f.opt_f64("k", |x| x > 1.0, "expected a number > 1");
    let lambda = f.opt_f64("lambda", |x| x > 1.0, "expected a number > 1");
    if k.is_some() && lambda.is_some() {
        f.bad("lambda", "set only one of k and lambda");
    }
    let delta = f.f64("delta", 0.25, |x| x > 0.0 && x < 1.0, "expected a number in (0, 1)");
    let tau = f.f64("tau", 1.0, positive, "expected a positive number");
    let mode = match f.string("mode").as_deref() {
        None | Some("desk") => Mode::Desk,
        Some("paper") => Mode::Paper,
        Some(_) => {
            f.bad("mode", "expected \"desk\" or \"paper\"");
            Mode::Desk
        }
    };
    let t_res = f.f64("t_res", 1.0, positive, "expected a positive number");
    let contour = match f.string("contour").as_deref() {
        None | Some("tau_l") => ContourConstant::TauL,
        Some("tau_pow_l") => ContourConstant::TauPowL,
        Some(_) => {
            f.bad("contour", "expected \"tau_l\" or \"tau_pow_l\"");
            ContourConstant::TauL
        }
    };
    let radii = f.f64_list("radii", &[1.0, 1.5, 2.0]);
    if radii.is_empty() || radii.windows(2).any(|w| w[1] <= w[0]) {
        f.bad("radii", "expected a non-empty strictly increasing list");
    }
    let default_poles: Vec<f64> = (1..radii.len()).map(|i| 0.01 / i as f64).collect();
    let pole_radii = f.f64_list("pole_radii", &default_poles);
    if pole_radii.len() + 1 != radii.len().max(1) {
        f.bad("pole_radii", "expected one entry per level after the first");
    }
    let window_half_width = f.f64("window_half_width", 0.1, positive, "expected a positive number");
    let samples_per_arc = f.u64("samples_per_arc", 2, 1, 100_000) as usize;
    let half_width = f.opt_f64("half_width", positive, "expected a positive number");
    let output = PathBuf::from(f.string("output").unwrap_or_else(|| "out".into()));
    let threads = f.opt_u64("threads", 1, 1024).map(|t| t as usize);
    let seed = f.u64("seed", 0, 0, u64::MAX);

    let lattice_v = f.raw("lattice");
    let resonance_v = f.raw("resonance");
    let spectrum_v = f.raw("spectrum");
    let regions_v = f.raw("regions");
    let schedule_v = f.raw("schedule");
    f.finish();

    let mut s = Fields::new(lattice_v.as_ref(), "$.lattice", errs);
    let lattice = LatticeSection {
        radius: s.f64("radius", 5.0, nonneg, "expected a non-negative number"),
        q_bound_max: s.u64("q_bound_max", 200, 1, 1_000_000_000),
        cluster_q_bound: s.u64("cluster_q_bound", 13, 1, 1_000_000_000),
        cluster_scale: s.opt_u64("cluster_scale", 1, 8),
    };
    s.finish();

    let mut s = Fields::new(resonance_v.as_ref(), "$.resonance", errs);
    let resonance = ResonanceSection {
        range: s.f64("range", 2.0, positive, "expected a positive number"),
        measure_c: s.f64("measure_c", 1.0, positive, "expected a positive number"),
        monte_carlo: s.u64("monte_carlo", 4096, 0, 100_000_000) as usize,
    };
    s.finish();

    let mut s = Fields::new(spectrum_v.as_ref(), "$.spectrum", errs);
    let spectrum = SpectrumSection {
        phi: s.f64("phi", 0.3, |_| true, "expected a number"),
        radius: s.f64("radius", 2.0, nonneg, "expected a non-negative number"),
        r_max: s.u64("r_max", 12, 1, 64) as usize,
    };
    s.finish();

    let mut s = Fields::new(regions_v.as_ref(), "$.regions", errs);
    let regions = RegionsSection {
        k: s.f64("k", 6.0, |x| x > 1.0, "expected a number > 1"),
        t_res: s.f64("t_res", 0.01, positive, "expected a positive number"),
        r1: s.f64("r1", 1.0, positive, "expected a positive number"),
        r2: s.f64("r2", 1.3, positive, "expected a positive number"),
        gamma: s.f64("gamma", 0.2, positive, "expected a positive number"),
        phi0: s.f64("phi0", 2.82, |_| true, "expected a number"),
        simple_threshold: s.f64("simple_threshold", 1e-9, nonneg, "expected a non-negative number"),
        box_size: s.opt_u64("box_size", 1, 1_000_000).map(|x| x as i64),
        small_box: s.opt_u64("small_box", 1, 1_000_000).map(|x| x as i64),
    };
    if regions.r2 <= regions.r1 {
        s.bad("r2", "must exceed r1");
    }
    s.finish();

    let mut s = Fields::new(schedule_v.as_ref(), "$.schedule", errs);
    let schedule = ScheduleSection {
        q: s.opt_f64("q", positive, "expected a positive number"),
        n_levels: s.u64("n_levels", 3, 1, 64) as usize,
        r1: s.f64("r1", 1.0, positive, "expected a positive number"),
        gamma: s.f64("gamma", 0.2, positive, "expected a positive number"),
    };
    s.finish();

    RunConfig {
        alpha,
        mu,
        precision,
        l,
        potential,
        k,
        lambda,
        delta,
        tau,
        mode,
        t_res,
        contour,
        radii,
        pole_radii,
        window_half_width,
        samples_per_arc,
        half_width,
        output,
        threads,
        seed,
        lattice,
        resonance,
        spectrum,
        regions,
        schedule,
    }
}
