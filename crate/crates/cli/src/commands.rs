use anyhow::{anyhow, bail, Context, Result};
use dmac::alloc_continuous::{allocate_continuous, ContinuousLaw};
use dmac::alloc_unit::{allocate_dynamic, allocate_l_user, build_grid, verify_outage_free, AllocationReport, Audit};
use dmac::baselines::{centralized_average, gtdm_optimize, stdm_average};
use dmac::dist::{to_f64, DiscreteLaw, RateFadingLaw, Rational};
use dmac::iteropt::{iteropt, Init, IterOptConfig, IterOptTrace};
use dmac::mdp::{stationary_rate_law, SchedulerPolicy};
use dmac::sim::{dd_config, run, truncated_geometric, DdSpec, PowerMap, Scheduler, SimConfig, SimReport, UserConfig};
use serde_json::json;

use crate::config::{Axis, Config, SchedulerKind, SimSpec};
use crate::output::{sig9, write_csv, OutDir};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum InitMode {
    Tdma,
    Unitdelay,
}

impl InitMode {
    fn init(self) -> Init {
        match self {
            InitMode::Tdma => Init::Tdma,
            InitMode::Unitdelay => Init::UnitDelay,
        }
    }
}

pub struct RunContext {
    pub out: OutDir,
    pub seed: Option<u64>,
    pub init: InitMode,
    pub format: Format,
}

/// Prints the command's headline result in the chosen format.
fn emit(ctx: &RunContext, summary: serde_json::Value, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    match ctx.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
        Format::Csv => write_csv(std::io::stdout().lock(), header, rows)?,
    }
    Ok(())
}

fn rate_laws(cfg: &Config) -> Result<Vec<RateFadingLaw>> {
    cfg.users
        .iter()
        .map(|u| RateFadingLaw::new(u.arrivals.clone(), u.fading.clone()))
        .collect::<dmac::Result<Vec<_>>>()
        .map_err(|e| anyhow!("users: {e}"))
}

fn pair<T: Clone>(items: &[T], what: &str) -> Result<[T; 2]> {
    match items {
        [a, b] => Ok([a.clone(), b.clone()]),
        _ => bail!("users: {what} needs exactly two users, got {}", items.len()),
    }
}

fn allocate(cfg: &Config) -> Result<AllocationReport> {
    match cfg.users.len() {
        0 | 1 => bail!("users: allocation needs at least two users"),
        2 => Ok(allocate_dynamic(&build_grid(&rate_laws(cfg)?)?).context("alloc_unit")?),
        _ => {
            let gains = cfg
                .users
                .iter()
                .enumerate()
                .map(|(i, u)| u.fixed_gain().cloned().ok_or_else(|| anyhow!("users[{i}].fading: more than two users need fixed gains")))
                .collect::<Result<Vec<_>>>()?;
            let laws: Vec<DiscreteLaw> = cfg.users.iter().map(|u| u.arrivals.clone()).collect();
            Ok(allocate_l_user(&laws, &gains).context("alloc_unit")?)
        }
    }
}

fn table_rows(report: &AllocationReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (u, entries) in report.table.users.iter().enumerate() {
        for e in entries {
            rows.push(vec![(u + 1).to_string(), sig9(to_f64(&e.rate)), sig9(to_f64(&e.gain)), sig9(e.power)]);
        }
    }
    rows
}

fn exact(r: &[Rational]) -> Vec<String> {
    r.iter().map(|x| x.to_string()).collect()
}

fn floats(r: &[Rational]) -> Vec<f64> {
    r.iter().map(to_f64).collect()
}

/// Returns whether the outage audit passed.
pub fn cmd_alloc(cfg: &Config, ctx: &RunContext) -> Result<bool> {
    let report = allocate(cfg)?;
    let audit = verify_outage_free(&report.table, &report.laws).context("alloc_unit")?;
    let mut doc = json!({
        "report": report,
        "audit": audit,
    });
    if cfg.users.len() == 2 {
        let grid = build_grid(&rate_laws(cfg)?)?;
        doc["grid"] = json!({
            "d0": to_f64(&grid.d0()),
            "d0_exact": grid.d0().to_string(),
            "levels": grid.users.iter().map(|u| floats(&u.cumulative)).collect::<Vec<_>>(),
            "levels_exact": grid.users.iter().map(|u| exact(&u.cumulative)).collect::<Vec<_>>(),
            "gammas": floats(&grid.gammas()),
        });
    }
    if let Some(spec) = &cfg.continuous {
        let [a, b] = pair(&cfg.users, "continuous allocation")?;
        let l1 = ContinuousLaw::smoothed(&a.arrivals, spec.width)?;
        let l2 = ContinuousLaw::smoothed(&b.arrivals, spec.width)?;
        let c = allocate_continuous(&l1, &l2, spec.alpha, spec.n_grid).context("alloc_continuous")?;
        let rows: Vec<Vec<String>> = c
            .samples
            .iter()
            .map(|s| [s.quantile, s.rate_1, s.power_1, s.rate_2, s.power_2].map(sig9).to_vec())
            .collect();
        ctx.out.csv("continuous.csv", &["quantile", "rate_1", "power_1", "rate_2", "power_2"], &rows)?;
        doc["continuous"] = json!({
            "alpha": c.alpha,
            "average_sum_power": c.average_sum_power,
            "sum_residual": c.sum_residual,
        });
    }
    ctx.out.json("allocation.json", &doc)?;
    let rows = table_rows(&report);
    ctx.out.csv("power_table.csv", &["user", "rate", "gain", "power"], &rows)?;
    let passed = audit.passed();
    if let Audit::Fail(v) = &audit {
        eprintln!("outage audit failed: {v:?}");
    }
    emit(
        ctx,
        json!({
            "achieved": report.achieved,
            "lower_bound": report.lower_bound,
            "d0": doc.get("grid").map(|g| g["d0"].clone()),
            "audit_passed": passed,
        }),
        &["user", "rate", "gain", "power"],
        &rows,
    )?;
    Ok(passed)
}

fn run_iteropt(cfg: &Config, init: Init) -> Result<IterOptTrace> {
    let gains = cfg
        .fixed_pair()
        .ok_or_else(|| anyhow!("users: iteropt needs exactly two users with fixed gains"))?;
    let arrivals = [cfg.users[0].arrivals.clone(), cfg.users[1].arrivals.clone()];
    let it = IterOptConfig {
        vi: cfg.vi.clone(),
        init,
        ..IterOptConfig::default()
    };
    iteropt(&arrivals, &gains, cfg.dmax, &it).context("iteropt")
}

fn policy_rows(iteration: usize, user: usize, p: &SchedulerPolicy) -> Vec<Vec<String>> {
    let delta = to_f64(p.delta());
    p.entries()
        .iter()
        .map(|(s, a)| {
            let state: Vec<String> = s.iter().map(|&x| sig9(x as f64 * delta)).collect();
            vec![iteration.to_string(), (user + 1).to_string(), state.join(";"), sig9(*a as f64 * delta)]
        })
        .collect()
}

fn describe(p: &SchedulerPolicy) -> String {
    match p.matrix() {
        Some(m) => m.to_string(),
        None => policy_rows(0, 0, p).iter().map(|r| format!("({}) -> {}\n", r[2], r[3])).collect(),
    }
}

pub fn cmd_iteropt(cfg: &Config, ctx: &RunContext) -> Result<()> {
    let trace = run_iteropt(cfg, ctx.init.init())?;
    ctx.out.json("iteropt.json", &trace)?;
    let mut rows = Vec::new();
    for (i, rec) in trace.iterations.iter().enumerate() {
        for (u, p) in rec.schedulers.iter().enumerate() {
            rows.extend(policy_rows(i, u, p));
        }
    }
    ctx.out.csv("schedulers.csv", &["iteration", "user", "state", "rate"], &rows)?;
    let last = trace.last();
    let text: String = last
        .schedulers
        .iter()
        .enumerate()
        .map(|(u, p)| format!("S{}\n{}\n", u + 1, describe(p)))
        .collect();
    ctx.out.text("schedulers.txt", &text)?;
    let summary_rows: Vec<Vec<String>> = trace
        .iterations
        .iter()
        .enumerate()
        .map(|(i, r)| vec![i.to_string(), sig9(r.average)])
        .collect();
    emit(
        ctx,
        json!({
            "refinements": trace.refinements(),
            "halt": trace.halt,
            "final_average": trace.final_average(),
            "schedulers": text,
        }),
        &["iteration", "average"],
        &summary_rows,
    )
}

fn sim_spec(cfg: &Config, ctx: &RunContext) -> SimSpec {
    let mut s = cfg.sim.clone().unwrap_or_default();
    if let Some(seed) = ctx.seed {
        s.seed = seed;
    }
    s
}

/// Per-user schedulers paired with the table allocated over their marginals.
fn scheduled(cfg: &Config, policies: Vec<SchedulerPolicy>, spec: &SimSpec) -> Result<(SimConfig, f64)> {
    let laws = cfg
        .users
        .iter()
        .zip(&policies)
        .map(|(u, p)| {
            let marginal = stationary_rate_law(p, &u.arrivals).context("mdp")?;
            Ok(RateFadingLaw::new(marginal, u.fading.clone())?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = allocate_dynamic(&build_grid(&laws)?).context("alloc_unit")?;
    let users = cfg
        .users
        .iter()
        .zip(policies)
        .enumerate()
        .map(|(i, (u, p))| UserConfig {
            arrivals: u.arrivals.clone(),
            fading: u.fading.clone(),
            scheduler: Scheduler::Policy(p),
            power: PowerMap::from_table(&report.table, i),
        })
        .collect();
    let sim = SimConfig {
        slots: spec.slots,
        reps: spec.reps,
        seed: spec.seed,
        dmax: cfg.dmax,
        users,
        trace: spec.trace,
    };
    Ok((sim, report.achieved))
}

fn robust_policies(cfg: &Config) -> Result<Vec<SchedulerPolicy>> {
    cfg.users
        .iter()
        .map(|u| SchedulerPolicy::robust(&u.arrivals, cfg.dmax, &cfg.vi.delta).context("mdp"))
        .collect()
}

fn dd_spec(cfg: &Config, spec: &SimSpec) -> DdSpec {
    DdSpec {
        arrivals: cfg.users.iter().map(|u| u.arrivals.clone()).collect(),
        fading: cfg.users.iter().map(|u| u.fading.clone()).collect(),
        dmax: cfg.dmax,
        slots: spec.slots,
        reps: spec.reps,
        seed: spec.seed,
        smoothing: spec.smoothing,
    }
}

/// The simulation config and, where one exists, the analytic average it estimates.
fn build_simulation(cfg: &Config, spec: &SimSpec, init: Init) -> Result<(SimConfig, Option<f64>)> {
    match cfg.scheduler {
        SchedulerKind::Identity => {
            let report = allocate(cfg)?;
            let mut sim = SimConfig::unit_delay(&report, spec.slots, spec.reps, spec.seed);
            sim.trace = spec.trace;
            Ok((sim, Some(report.achieved)))
        }
        SchedulerKind::Robust => {
            let (sim, avg) = scheduled(cfg, robust_policies(cfg)?, spec)?;
            Ok((sim, Some(avg)))
        }
        SchedulerKind::Iteropt => {
            let trace = run_iteropt(cfg, init)?;
            let (sim, avg) = scheduled(cfg, trace.last().schedulers.clone(), spec)?;
            Ok((sim, Some(avg)))
        }
        SchedulerKind::Dd => {
            let mut sim = dd_config(&dd_spec(cfg, spec)).context("sim")?;
            sim.trace = spec.trace;
            Ok((sim, None))
        }
    }
}

fn simulate(sim: &SimConfig) -> Result<SimReport> {
    run(sim).context("sim")
}

pub fn cmd_simulate(cfg: &Config, ctx: &RunContext) -> Result<()> {
    let spec = sim_spec(cfg, ctx);
    let (sim, analytic) = build_simulation(cfg, &spec, ctx.init.init())?;
    let report = simulate(&sim)?;
    ctx.out.json("simulation.json", &json!({ "analytic_average": analytic, "report": report }))?;
    if spec.trace {
        let rows: Vec<Vec<String>> = report
            .trace
            .iter()
            .map(|t| {
                vec![
                    t.slot.to_string(),
                    (t.user + 1).to_string(),
                    sig9(t.arrival),
                    sig9(t.fading),
                    sig9(t.rate),
                    sig9(t.power),
                    u8::from(t.outage_flag).to_string(),
                ]
            })
            .collect();
        ctx.out.csv("trace.csv", &["slot", "user", "arrival", "fading", "rate", "power", "outage_flag"], &rows)?;
    }
    let row = vec![
        sig9(report.average_sum_power),
        report.standard_error.map(sig9).unwrap_or_default(),
        analytic.map(sig9).unwrap_or_default(),
        report.outages.to_string(),
        report.delay_violations.to_string(),
    ];
    emit(
        ctx,
        json!({
            "average_sum_power": report.average_sum_power,
            "standard_error": report.standard_error,
            "analytic_average": analytic,
            "outages": report.outages,
            "delay_violations": report.delay_violations,
        }),
        &["average_sum_power", "standard_error", "analytic_average", "outages", "delay_violations"],
        &[row],
    )
}

struct Baselines {
    centralized: f64,
    decentralized: f64,
    tau: f64,
    gtdm: f64,
    stdm: f64,
}

fn baselines(cfg: &Config) -> Result<Baselines> {
    let laws = pair(&rate_laws(cfg)?, "the baseline comparison")?;
    let (tau, gtdm) = gtdm_optimize(&laws);
    Ok(Baselines {
        centralized: centralized_average(&laws[0], &laws[1]),
        decentralized: allocate(cfg)?.achieved,
        tau,
        gtdm,
        stdm: stdm_average(&laws),
    })
}

pub fn cmd_baselines(cfg: &Config, ctx: &RunContext) -> Result<()> {
    let b = baselines(cfg)?;
    let doc = json!({
        "centralized": b.centralized,
        "decentralized": b.decentralized,
        "gtdm": { "tau": b.tau, "average": b.gtdm },
        "stdm": { "tau": 0.5, "average": b.stdm },
    });
    let rows = vec![
        vec!["centralized".into(), sig9(b.centralized), String::new()],
        vec!["decentralized".into(), sig9(b.decentralized), String::new()],
        vec!["gtdm".into(), sig9(b.gtdm), sig9(b.tau)],
        vec!["stdm".into(), sig9(b.stdm), "0.5".into()],
    ];
    let header = ["scheme", "average", "tau"];
    ctx.out.json("baselines.json", &doc)?;
    ctx.out.csv("baselines.csv", &header, &rows)?;
    emit(ctx, doc, &header, &rows)
}

fn scale_values(law: &DiscreteLaw, by: &Rational) -> Result<DiscreteLaw> {
    Ok(DiscreteLaw::new(law.atoms().iter().map(|a| (&a.value * by, a.prob.clone())).collect())?)
}

/// The config at one sweep point.
fn at_point(cfg: &Config, axis: Axis, v: &Rational, levels: usize) -> Result<Config> {
    let mut c = cfg.clone();
    match axis {
        Axis::Alpha => {
            let u = c.users.get_mut(1).ok_or_else(|| anyhow!("sweep.axis: alpha needs a second user"))?;
            u.fading = scale_values(&u.fading, v)?;
        }
        Axis::GammaA => c.users[0].fading = scale_values(&c.users[0].fading, v)?,
        Axis::P1 => c.users[0].arrivals = truncated_geometric(v, levels)?,
        Axis::Delta => c.vi.delta = v.clone(),
        Axis::Dmax => c.dmax = v.to_integer().try_into().map_err(|_| anyhow!("sweep.grid: dmax out of range"))?,
    }
    Ok(c)
}

struct Row {
    scheme: String,
    average: f64,
    source: &'static str,
}

fn analytic(scheme: impl Into<String>, average: f64) -> Row {
    Row {
        scheme: scheme.into(),
        average,
        source: "analytic",
    }
}

fn simulated(scheme: impl Into<String>, average: f64) -> Row {
    Row {
        scheme: scheme.into(),
        average,
        source: "simulated",
    }
}

fn sweep_point(cfg: &Config, deltas: &[Rational], spec: Option<&SimSpec>, init: &Init) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    if cfg.dmax == 1 {
        let b = baselines(cfg)?;
        rows.push(analytic("centralized", b.centralized));
        rows.push(analytic("decentral", b.decentralized));
        rows.push(analytic("gtdm", b.gtdm));
        rows.push(analytic("stdm", b.stdm));
        if let Some(s) = spec {
            let (sim, _) = build_simulation(&Config { scheduler: SchedulerKind::Identity, ..cfg.clone() }, s, Init::UnitDelay)?;
            rows.push(simulated("decentral", simulate(&sim)?.average_sum_power));
        }
        return Ok(rows);
    }
    let (_, robust) = scheduled(cfg, robust_policies(cfg)?, &SimSpec::default())?;
    rows.push(analytic("robust", robust));
    if cfg.fixed_pair().is_some() {
        // each quantum starts from the previous optimum when it refines it
        let mut start = init.clone();
        let mut previous: Option<Rational> = None;
        for d in deltas {
            let divides = previous.as_ref().is_some_and(|p| (p / d).is_integer());
            let this_init = if divides { start.clone() } else { init.clone() };
            let trace = run_iteropt(&Config { vi: cfg.vi.clone().with_delta(d.clone()), ..cfg.clone() }, this_init)?;
            rows.push(analytic(format!("iteropt_delta_{}", sig9(to_f64(d))), trace.final_average()));
            start = Init::Schedulers(trace.last().schedulers.clone());
            previous = Some(d.clone());
        }
    }
    if let Some(s) = spec {
        rows.push(simulated("dd", simulate(&dd_config(&dd_spec(cfg, s)).context("sim")?)?.average_sum_power));
    }
    Ok(rows)
}

pub fn cmd_sweep(cfg: &Config, ctx: &RunContext) -> Result<()> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| anyhow!("sweep: required field is missing"))?;
    let spec = cfg.sim.as_ref().map(|_| sim_spec(cfg, ctx));
    let init = ctx.init.init();
    let mut rows = Vec::new();
    for v in &sweep.grid {
        let point = at_point(cfg, sweep.axis, v, sweep.levels)?;
        let deltas = if sweep.axis == Axis::Delta { vec![v.clone()] } else { sweep.deltas.clone() };
        for r in sweep_point(&point, &deltas, spec.as_ref(), &init)
            .with_context(|| format!("sweep point {} = {v}", sweep.axis.name()))?
        {
            rows.push(vec![sig9(to_f64(v)), r.scheme, sig9(r.average), r.source.to_string()]);
        }
    }
    let header = [sweep.axis.name(), "scheme", "average_sum_power", "source"];
    ctx.out.csv("sweep.csv", &header, &rows)?;
    let doc = json!(rows
        .iter()
        .map(|r| json!({ sweep.axis.name(): r[0], "scheme": r[1], "average_sum_power": r[2], "source": r[3] }))
        .collect::<Vec<_>>());
    emit(ctx, doc, &header, &rows)
}
