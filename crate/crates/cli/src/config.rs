//! JSON config ingestion. Every error names the offending field path.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dmac::dist::{parse_rational, DiscreteLaw, Rational};
use dmac::mdp::ViConfig;
use num::{One, Signed};
use serde_json::{Map, Value};

#[derive(Clone, Debug)]
pub struct UserSpec {
    pub arrivals: DiscreteLaw,
    /// Power gain law; a point law when the user's gain is fixed.
    pub fading: DiscreteLaw,
}

impl UserSpec {
    /// The gain when the fading law is a single point.
    pub fn fixed_gain(&self) -> Option<&Rational> {
        match self.fading.atoms() {
            [only] => Some(&only.value),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerKind {
    Identity,
    Robust,
    Iteropt,
    Dd,
}

#[derive(Clone, Debug)]
pub struct SimSpec {
    pub slots: u64,
    pub reps: u32,
    pub seed: u64,
    pub trace: bool,
    pub smoothing: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            slots: 10_000,
            reps: 1,
            seed: 0,
            trace: false,
            smoothing: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Scales every gain of user 2.
    Alpha,
    /// Scales every gain of user 1.
    GammaA,
    /// Truncated-geometric parameter of user 1's arrivals.
    P1,
    Delta,
    Dmax,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::GammaA => "gamma_a",
            Axis::P1 => "p1",
            Axis::Delta => "delta",
            Axis::Dmax => "dmax",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub axis: Axis,
    pub grid: Vec<Rational>,
    /// Rate quanta evaluated at each point when `dmax > 1`.
    pub deltas: Vec<Rational>,
    /// Support size of the truncated-geometric law on the `p1` axis.
    pub levels: usize,
}

#[derive(Clone, Debug)]
pub struct ContinuousSpec {
    pub alpha: f64,
    pub n_grid: usize,
    pub width: f64,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub users: Vec<UserSpec>,
    pub dmax: usize,
    pub scheduler: SchedulerKind,
    pub vi: ViConfig,
    pub sim: Option<SimSpec>,
    pub sweep: Option<SweepSpec>,
    pub continuous: Option<ContinuousSpec>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self> {
        let top = object(value, "$")?;
        known_fields(top, "$", &["users", "gains", "dmax", "scheduler", "vi", "sim", "sweep", "continuous"])?;

        let users_v = top.get("users").ok_or_else(|| anyhow!("users: required field is missing"))?;
        let users_a = users_v.as_array().ok_or_else(|| anyhow!("users: expected an array"))?;
        if users_a.is_empty() {
            bail!("users: at least one user is required");
        }
        let gains = match top.get("gains") {
            None | Some(Value::Null) => None,
            Some(Value::Array(g)) => {
                if g.len() != users_a.len() {
                    bail!("gains: expected {} entries, one per user, got {}", users_a.len(), g.len());
                }
                Some(
                    g.iter()
                        .enumerate()
                        .map(|(i, v)| positive(v, &format!("gains[{i}]")))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            Some(_) => bail!("gains: expected an array"),
        };
        let mut users = Vec::with_capacity(users_a.len());
        for (i, u) in users_a.iter().enumerate() {
            let path = format!("users[{i}]");
            let obj = object(u, &path)?;
            known_fields(obj, &path, &["arrivals", "fading"])?;
            let arrivals = law(
                obj.get("arrivals").ok_or_else(|| anyhow!("{path}.arrivals: required field is missing"))?,
                &format!("{path}.arrivals"),
            )?;
            if arrivals.atoms().iter().any(|a| a.value.is_negative()) {
                bail!("{path}.arrivals: rates must be nonnegative");
            }
            let fading = match (obj.get("fading"), &gains) {
                (Some(_), Some(_)) => bail!("{path}.fading: conflicts with gains[{i}]; give one or the other"),
                (Some(f), None) => {
                    let f = law(f, &format!("{path}.fading"))?;
                    if f.atoms().iter().any(|a| !a.value.is_positive()) {
                        bail!("{path}.fading: gains must be positive");
                    }
                    f
                }
                (None, Some(g)) => DiscreteLaw::point(g[i].clone()),
                (None, None) => DiscreteLaw::point(Rational::one()),
            };
            users.push(UserSpec { arrivals, fading });
        }

        let dmax = match top.get("dmax") {
            None => 1,
            Some(v) => {
                let d = v.as_u64().filter(|&d| d >= 1).ok_or_else(|| anyhow!("dmax: expected an integer >= 1"))?;
                d as usize
            }
        };
        let scheduler = match top.get("scheduler").map(|v| v.as_str()) {
            None => SchedulerKind::Identity,
            Some(Some("identity")) => SchedulerKind::Identity,
            Some(Some("robust")) => SchedulerKind::Robust,
            Some(Some("iteropt")) => SchedulerKind::Iteropt,
            Some(Some("dd")) => SchedulerKind::Dd,
            Some(_) => bail!("scheduler: expected one of \"identity\", \"robust\", \"iteropt\", \"dd\""),
        };

        let mut vi = ViConfig::default();
        if let Some(v) = top.get("vi") {
            let obj = object(v, "vi")?;
            known_fields(obj, "vi", &["gamma", "delta", "tol", "max_iterations"])?;
            if let Some(g) = obj.get("gamma") {
                vi.gamma = float(g, "vi.gamma")?;
            }
            if let Some(d) = obj.get("delta") {
                vi.delta = positive(d, "vi.delta")?;
            }
            if let Some(t) = obj.get("tol") {
                vi.tol = float(t, "vi.tol")?;
            }
            if let Some(m) = obj.get("max_iterations") {
                vi.max_iterations = unsigned(m, "vi.max_iterations")? as usize;
            }
            vi.validate().map_err(|e| anyhow!("vi: {e}"))?;
        }

        let sim = match top.get("sim") {
            None => None,
            Some(v) => {
                let obj = object(v, "sim")?;
                known_fields(obj, "sim", &["slots", "reps", "seed", "trace", "smoothing"])?;
                let mut s = SimSpec::default();
                if let Some(x) = obj.get("slots") {
                    s.slots = unsigned(x, "sim.slots")?;
                    if s.slots == 0 {
                        bail!("sim.slots: must be at least 1");
                    }
                }
                if let Some(x) = obj.get("reps") {
                    s.reps = u32::try_from(unsigned(x, "sim.reps")?).map_err(|_| anyhow!("sim.reps: too large"))?;
                    if s.reps == 0 {
                        bail!("sim.reps: must be at least 1");
                    }
                }
                if let Some(x) = obj.get("seed") {
                    s.seed = unsigned(x, "sim.seed")?;
                }
                if let Some(x) = obj.get("trace") {
                    s.trace = x.as_bool().ok_or_else(|| anyhow!("sim.trace: expected a boolean"))?;
                }
                if let Some(x) = obj.get("smoothing") {
                    s.smoothing = float(x, "sim.smoothing")?;
                    if !(0.0..=1.0).contains(&s.smoothing) {
                        bail!("sim.smoothing: must lie in [0, 1]");
                    }
                }
                Some(s)
            }
        };

        let sweep = match top.get("sweep") {
            None => None,
            Some(v) => {
                let obj = object(v, "sweep")?;
                known_fields(obj, "sweep", &["axis", "grid", "deltas", "levels"])?;
                let axis = match obj.get("axis").and_then(Value::as_str) {
                    Some("alpha") => Axis::Alpha,
                    Some("gamma_a") => Axis::GammaA,
                    Some("p1") => Axis::P1,
                    Some("delta") => Axis::Delta,
                    Some("dmax") => Axis::Dmax,
                    _ => bail!("sweep.axis: expected one of \"alpha\", \"gamma_a\", \"p1\", \"delta\", \"dmax\""),
                };
                let grid = positive_list(obj.get("grid"), "sweep.grid")?;
                if grid.is_empty() {
                    bail!("sweep.grid: at least one point is required");
                }
                if axis == Axis::Dmax && grid.iter().any(|g| !g.is_integer()) {
                    bail!("sweep.grid: dmax points must be integers");
                }
                if axis == Axis::P1 && grid.iter().any(|g| g > &Rational::one()) {
                    bail!("sweep.grid: p1 points must lie in (0, 1]");
                }
                let deltas = match obj.get("deltas") {
                    None => vec![vi.delta.clone()],
                    some => positive_list(some, "sweep.deltas")?,
                };
                let levels = match obj.get("levels") {
                    None => users[0].arrivals.atoms().len().max(2),
                    Some(x) => unsigned(x, "sweep.levels")?.max(1) as usize,
                };
                Some(SweepSpec {
                    axis,
                    grid,
                    deltas,
                    levels,
                })
            }
        };

        let continuous = match top.get("continuous") {
            None => None,
            Some(v) => {
                let obj = object(v, "continuous")?;
                known_fields(obj, "continuous", &["alpha", "n_grid", "width"])?;
                let alpha = match obj.get("alpha") {
                    None => 1.0,
                    Some(a) => float(a, "continuous.alpha")?,
                };
                if !(alpha > 0.0) {
                    bail!("continuous.alpha: must be positive");
                }
                let n_grid = match obj.get("n_grid") {
                    None => 1024,
                    Some(n) => unsigned(n, "continuous.n_grid")? as usize,
                };
                let width = match obj.get("width") {
                    None => 1e-3,
                    Some(w) => float(w, "continuous.width")?,
                };
                Some(ContinuousSpec { alpha, n_grid, width })
            }
        };

        Ok(Config {
            users,
            dmax,
            scheduler,
            vi,
            sim,
            sweep,
            continuous,
        })
    }

    /// Both users' fixed gains, when there are exactly two and neither fades.
    pub fn fixed_pair(&self) -> Option<[Rational; 2]> {
        match self.users.as_slice() {
            [a, b] => Some([a.fixed_gain()?.clone(), b.fixed_gain()?.clone()]),
            _ => None,
        }
    }
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| anyhow!("{path}: expected an object"))
}

fn known_fields(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<()> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            let at = if path == "$" { key.clone() } else { format!("{path}.{key}") };
            bail!("{at}: unknown field");
        }
    }
    Ok(())
}

/// A number, or a string such as `"1/3"` or `"0.25"`, read exactly.
fn rational(v: &Value, path: &str) -> Result<Rational> {
    let text = match v {
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        _ => bail!("{path}: expected a number or a rational string"),
    };
    parse_rational(&text).map_err(|_| anyhow!("{path}: not a rational number: {text:?}"))
}

fn positive(v: &Value, path: &str) -> Result<Rational> {
    let r = rational(v, path)?;
    if !r.is_positive() {
        bail!("{path}: must be positive");
    }
    Ok(r)
}

fn positive_list(v: Option<&Value>, path: &str) -> Result<Vec<Rational>> {
    let a = v
        .and_then(Value::as_array)
        .ok_or_else(|| anyhow!("{path}: expected an array"))?;
    a.iter().enumerate().map(|(i, x)| positive(x, &format!("{path}[{i}]"))).collect()
}

fn float(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| anyhow!("{path}: expected a number"))
}

fn unsigned(v: &Value, path: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| anyhow!("{path}: expected a nonnegative integer"))
}

/// A list of `[value, prob]` pairs.
fn law(v: &Value, path: &str) -> Result<DiscreteLaw> {
    let pairs = v.as_array().ok_or_else(|| anyhow!("{path}: expected a list of [value, prob] pairs"))?;
    if pairs.is_empty() {
        bail!("{path}: empty support");
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (j, p) in pairs.iter().enumerate() {
        let at = format!("{path}[{j}]");
        match p.as_array().map(Vec::as_slice) {
            Some([value, prob]) => out.push((rational(value, &format!("{at}[0]"))?, rational(prob, &format!("{at}[1]"))?)),
            _ => bail!("{at}: expected a [value, prob] pair"),
        }
    }
    DiscreteLaw::new(out).map_err(|e| anyhow!("{path}: {e}"))
}
