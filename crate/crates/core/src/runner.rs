//! Scenario orchestration behind the `oldnash` binary: builds the model
//! from a validated config, runs one subcommand and writes its artifacts
//! (`report.json`, `tables/*.csv`, `fields/*.oldn`).
//!
//! Reports carry no timings or thread counts, so a fixed `(config, seed)`
//! always produces byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::FieldCheckpoint;
use crate::config::{LeaderControlSource, ScenarioConfig, TargetSource};
use crate::diagnostics::{
    adjoint_identity_check, appendix_smallness_check, energy_monitor, fubini_check, memory_consistency,
};
use crate::error::{Error, Result};
use crate::geometry::{build_grid, indicator, make_weight, norm_h, VelocityField};
use crate::leader::{check_variational_inequality, controllability_sweep, minimize_dual, LeaderProblem, TOL_ACCEPT};
use crate::nash::{
    beta0_estimate, cost_j_i, nash_inequality_check, rhs_scale, solve_nash, solve_nash_tracking,
    solve_nash_via_optimality_system, tracking_cost, CostParams, TrackingData,
};
use crate::solvers::{solve_follower_adjoint, ControlSet, Model, SpaceTimeField};
use crate::stokes::SaddleFactorization;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Verify,
    Nash,
    Leader,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Nash => "nash",
            Command::Leader => "leader",
            Command::Sweep => "sweep",
        }
    }
}

pub const EXIT_OK: i32 = 0;
/// A verification check failed or a sweep row is infeasible.
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// `smooth_random` targets: white noise through `(I - l^2 lap)^{-3}` with
/// the Stokes constraint, `l ~ 0.14`. Grid-scale noise is not the discrete
/// image of any fixed element of H, and most of it sits in modes whose
/// Gramian eigenvalues are below roundoff on desk-scale grids.
pub const SMOOTHING_LENGTH_SQ: f64 = 2e-2;
pub const SMOOTHING_STEPS: usize = 3;

/// Everything a subcommand needs, built deterministically from the config.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: Model,
    pub cost: CostParams,
    /// Leader control for the `nash` subcommand.
    pub leader_control: SpaceTimeField,
    /// Control that reaches the target exactly (reachable targets only).
    pub reaching_control: Option<SpaceTimeField>,
}

/// Independent stream per purpose so adding a draw in one place never
/// shifts another.
fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_leader_control(model: &Model, rng: &mut ChaCha8Rng) -> SpaceTimeField {
    SpaceTimeField::from_fn(&model.grid, |_, _, _, _| rng.random_range(-1.0..1.0)).masked(&model.leader_mask)
}

pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    let grid = build_grid(config.grid)?;
    let model = Model::new(
        grid,
        config.kernel,
        config.scheme,
        config.leader_region,
        config.followers.iter().map(|f| f.control).collect(),
    )?;
    let g = &model.grid;
    let weights = config
        .followers
        .iter()
        .map(|f| make_weight(&f.core, &f.support, g))
        .collect::<Result<Vec<_>>>()?;

    let scale = config.target_scale;
    let normalized = |f: VelocityField| {
        let n = norm_h(&f, g);
        f.scaled(scale / n)
    };
    let mut reaching_control = None;
    let mut reaching_states = None;
    let target = match config.target {
        TargetSource::Zero => VelocityField::zeros(g),
        TargetSource::Reachable => {
            let v = random_leader_control(&model, &mut rng_for(config.seed, 1));
            let states = model.states_of(&v)?;
            let k = scale / norm_h(states.slots.last().unwrap(), g);
            reaching_control = Some(v.scaled(k));
            reaching_states = Some(states.scaled(k));
            model.terminal_of(reaching_control.as_ref().unwrap())?
        }
        TargetSource::Random => {
            let mut rng = rng_for(config.seed, 2);
            normalized(model.project(&VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0)))?)
        }
        TargetSource::SmoothRandom => {
            let mut rng = rng_for(config.seed, 2);
            let smoother = SaddleFactorization::with_coefficients(g, 1.0, SMOOTHING_LENGTH_SQ)?;
            let mut f = VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0));
            for _ in 0..SMOOTHING_STEPS {
                f = smoother.solve_velocity(&f);
            }
            normalized(f)
        }
    };
    let mut cost = CostParams::new(config.alphas.clone(), target.clone(), weights)?;
    if config.tracking {
        let n = config.followers.len();
        let trajectory = reaching_states.unwrap_or_else(|| {
            let mut t = SpaceTimeField::zeros(g);
            t.slots.iter_mut().for_each(|s| *s = target.clone());
            t
        });
        cost.tracking = Some(TrackingData {
            alphas: config.alphas.clone(),
            mus: config.mus.clone(),
            targets: vec![trajectory; n],
            control_masks: model.follower_masks.clone(),
            observation_masks: config
                .followers
                .iter()
                .map(|f| indicator(&f.observe, g))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    let leader_control = match config.leader_control {
        LeaderControlSource::Zero => SpaceTimeField::zeros(g),
        LeaderControlSource::Random => random_leader_control(&model, &mut rng_for(config.seed, 3)),
    };
    Ok(Scenario {
        config: config.clone(),
        model,
        cost,
        leader_control,
        reaching_control,
    })
}

/// One pass/fail line of the `verify` battery.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    /// `value <= threshold` for `"le"`, `value >= threshold` for `"ge"`.
    pub comparison: &'static str,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn le(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            value,
            comparison: "le",
            threshold,
            passed: value <= threshold,
        }
    }

    fn ge(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            value,
            comparison: "ge",
            threshold,
            passed: value >= threshold,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub report: Value,
    pub files: Vec<PathBuf>,
}

struct Artifacts {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }

    fn field(&mut self, name: &str, model: &Model, levels: &[VelocityField]) -> Result<()> {
        let ck = FieldCheckpoint::from_levels(&model.grid, levels)?;
        self.write(&format!("fields/{name}.oldn"), &ck.to_bytes())
    }

    fn json(&mut self, report: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Invalid(e.to_string()))?;
        text.push('\n');
        self.write("report.json", text.as_bytes())
    }
}

fn csv_number(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else {
        String::new()
    }
}

/// Run `command` on the scenario and write its artifacts under `out`.
pub fn run_scenario(command: Command, config: &ScenarioConfig, out: &Path) -> Result<RunOutcome> {
    let scenario = build_scenario(config)?;
    let mut art = Artifacts::new(out)?;
    let (exit_code, report) = match command {
        Command::Verify => run_verify(&scenario, &mut art)?,
        Command::Nash => run_nash(&scenario, &mut art)?,
        Command::Leader => run_leader(&scenario, &mut art)?,
        Command::Sweep => run_sweep(&scenario, &mut art)?,
    };
    let report = json!({
        "command": command.name(),
        "seed": config.seed,
        "config": config,
        "result": report,
    });
    art.json(&report)?;
    Ok(RunOutcome {
        exit_code,
        report,
        files: art.files,
    })
}

/// Machine-readable error record for a failed run.
pub fn error_json(code: &str, message: &str, exit_code: i32, line: Option<usize>) -> Value {
    json!({ "error": { "code": code, "message": message, "exit_code": exit_code, "line": line } })
}

fn run_verify(s: &Scenario, art: &mut Artifacts) -> Result<(i32, Value)> {
    let (m, cost, cfg) = (&s.model, &s.cost, &s.config);
    let g = &m.grid;
    let mut checks = Vec::new();
    let mut details = serde_json::Map::new();

    let adj = adjoint_identity_check(cost, m, cfg.adjoint_trials, cfg.seed)?;
    checks.push(Check::le("adjoint_identity", adj.max_relative_error, 1e-9));
    details.insert("adjoint_identity".into(), json!(adj));

    checks.push(Check::le("fubini", fubini_check(m, 4, cfg.seed)?, 1e-10));

    let mem = memory_consistency(m, &[8, 16, 32])?;
    let worst_order = mem.observed_orders.iter().map(|r| (r - 2.0).abs()).fold(0.0, f64::max);
    checks.push(Check::le("memory_order_deviation", worst_order, 0.2));
    checks.push(Check::le("memory_gamma0", mem.gamma0_error, 1e-10));
    details.insert("memory".into(), json!(mem));

    let mut rng = rng_for(cfg.seed, 4);
    let f = m.project(&VelocityField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0)))?;
    let energy = energy_monitor(&solve_follower_adjoint(&f, m)?, m);
    checks.push(Check::le("energy_bound", energy.max_ratio, energy.bound));
    checks.push(Check::le("energy_balance", energy.max_balance_residual, energy.balance_tolerance));
    details.insert(
        "energy".into(),
        json!({ "max_ratio": energy.max_ratio, "bound": energy.bound, "monotone": energy.monotone,
                "max_balance_residual": energy.max_balance_residual }),
    );

    let small = appendix_smallness_check(cost, m, &f)?;
    checks.push(Check::ge("smallness_beta", small.beta, f64::MIN_POSITIVE));
    checks.push(Check::le("smallness_bound", small.measured, small.bound));
    details.insert("smallness".into(), json!(small));

    let beta0 = beta0_estimate(cost, m, cfg.coercivity_samples)?;
    checks.push(Check::le("beta0", beta0.beta0, 1.0 - 1e-12));
    checks.push(Check::ge(
        "coercivity",
        beta0.empirical_min_ratio,
        1.0 - beta0.beta0 - 1e-8,
    ));
    details.insert("beta0".into(), json!(beta0));

    let v = &s.leader_control;
    let nash = solve_nash(v, cost, m)?;
    let scale = rhs_scale(v, cost, m)?.max(f64::MIN_POSITIVE);
    let el = nash.el_residuals.iter().fold(0.0, |a: f64, b| a.max(*b)) / scale;
    checks.push(Check::le("nash_el_residual", el, 1e-8));
    let ineq = nash_inequality_check(v, &nash, cost, m, cfg.perturbations, cfg.seed)?;
    checks.push(Check::le("nash_inequality_decreases", ineq.decreases as f64, 0.0));
    let os = solve_nash_via_optimality_system(v, cost, m)?;
    let route = relative_difference(&os.w, &nash.w, m);
    checks.push(Check::le("nash_route_agreement", route, 1e-6));
    details.insert(
        "nash".into(),
        json!({ "method": nash.method, "iterations": nash.iterations, "relative_residual": nash.relative_residual,
                "el_relative": el, "inequality": ineq, "route_difference": route,
                "os_iterations": os.iterations }),
    );

    if let Some(tr) = &cost.tracking {
        let sol = solve_nash_tracking(v, m, tr)?;
        let r = sol.el_residuals.iter().fold(0.0, |a: f64, b| a.max(*b));
        let scale = sol.w.iter().map(|w| w.norm(g)).fold(0.0, f64::max).max(1.0);
        checks.push(Check::le("tracking_el_residual", r / scale, 1e-8));
    }

    let problem = LeaderProblem {
        method: cfg.dual_method,
        ..LeaderProblem::new(m.clone(), cost.clone(), cfg.epsilon)?
    };
    let sol = minimize_dual(&problem)?;
    let vi = check_variational_inequality(&sol, &problem, cfg.vi_samples, cfg.seed)?;
    checks.push(Check::le("leader_distance", sol.distance, sol.epsilon * (1.0 + TOL_ACCEPT)));
    checks.push(Check::le("duality_gap", sol.gap.abs(), 1e-4 * sol.leader_cost.max(1.0)));
    checks.push(Check::ge("variational_inequality", vi.min_value, -1e-6 * vi.scale));
    details.insert(
        "leader".into(),
        json!({ "epsilon": sol.epsilon, "distance": sol.distance, "leader_cost": sol.leader_cost,
                "dual_value": sol.dual_value, "gap": sol.gap, "iterations": sol.iterations, "vi": vi }),
    );

    let mut csv = String::from("check,value,comparison,threshold,passed\n");
    for c in &checks {
        let _ = writeln!(csv, "{},{},{},{},{}", c.name, csv_number(c.value), c.comparison, csv_number(c.threshold), c.passed);
    }
    art.write("tables/verify.csv", csv.as_bytes())?;
    let all = checks.iter().all(|c| c.passed);
    Ok((
        if all { EXIT_OK } else { EXIT_CHECK_FAILED },
        json!({ "all_passed": all, "checks": checks, "details": details }),
    ))
}

fn relative_difference(a: &[SpaceTimeField], b: &[SpaceTimeField], m: &Model) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let mut d = x.clone();
        d.axpy(-1.0, y);
        num += d.dot(&d, &m.grid);
        den += y.dot(y, &m.grid);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn run_nash(s: &Scenario, art: &mut Artifacts) -> Result<(i32, Value)> {
    let (m, cost) = (&s.model, &s.cost);
    let g = &m.grid;
    let v = &s.leader_control;
    art.field("leader_control", m, &v.slots)?;
    if let Some(tr) = &cost.tracking {
        let sol = solve_nash_tracking(v, m, tr)?;
        let mut forcing = v.masked(&m.leader_mask);
        for w in &sol.w {
            forcing.axpy(1.0, w);
        }
        let states = m.states_of(&forcing)?;
        let costs: Vec<f64> = (0..sol.w.len()).map(|i| tracking_cost(i, &states, &sol.w[i], tr, m)).collect();
        for (i, w) in sol.w.iter().enumerate() {
            art.field(&format!("follower_{}", i + 1), m, &w.slots)?;
        }
        art.field("state_T", m, std::slice::from_ref(&sol.state_t))?;
        return Ok((
            EXIT_OK,
            json!({ "mode": "tracking", "costs": costs, "el_residuals": sol.el_residuals,
                    "iterations": sol.iterations, "method": sol.method,
                    "control_norms": sol.w.iter().map(|w| w.norm(g)).collect::<Vec<_>>() }),
        ));
    }
    let sol = solve_nash(v, cost, m)?;
    let controls = ControlSet {
        v: v.clone(),
        w: sol.w.clone(),
    };
    let costs: Vec<f64> = (0..cost.n()).map(|i| cost_j_i(i, &controls, cost, &sol.state_t, m)).collect();
    let ineq = nash_inequality_check(v, &sol, cost, m, s.config.perturbations, s.config.seed)?;
    let beta0 = beta0_estimate(cost, m, 0)?;
    for (i, w) in sol.w.iter().enumerate() {
        art.field(&format!("follower_{}", i + 1), m, &w.slots)?;
    }
    art.field("state_T", m, std::slice::from_ref(&sol.state_t))?;
    Ok((
        EXIT_OK,
        json!({ "mode": "terminal", "method": sol.method, "iterations": sol.iterations,
                "relative_residual": sol.relative_residual, "el_residuals": sol.el_residuals,
                "costs": costs, "control_norms": sol.w.iter().map(|w| w.norm(g)).collect::<Vec<_>>(),
                "inequality": ineq, "beta0": beta0.beta0, "c0_sq": beta0.c0_sq }),
    ))
}

fn leader_problem(s: &Scenario) -> Result<LeaderProblem> {
    if s.cost.tracking.is_some() {
        return Err(Error::Invalid("tracking mode is only available for the nash subcommand".into()));
    }
    Ok(LeaderProblem {
        method: s.config.dual_method,
        ..LeaderProblem::new(s.model.clone(), s.cost.clone(), s.config.epsilon)?
    })
}

fn run_leader(s: &Scenario, art: &mut Artifacts) -> Result<(i32, Value)> {
    let problem = leader_problem(s)?;
    let m = &s.model;
    let sol = minimize_dual(&problem)?;
    let vi = check_variational_inequality(&sol, &problem, s.config.vi_samples, s.config.seed)?;
    art.field("leader_control", m, &sol.v.slots)?;
    art.field("dual_f", m, std::slice::from_ref(&sol.f))?;
    art.field("state_T", m, std::slice::from_ref(&sol.state_t))?;
    art.field("target", m, std::slice::from_ref(problem.target()))?;
    let mut csv = String::from("eta,iterations,grad_norm,gap\n");
    for st in &sol.stages {
        let _ = writeln!(csv, "{},{},{},{}", csv_number(st.eta), st.iterations, csv_number(st.grad_norm), csv_number(st.gap));
    }
    art.write("tables/stages.csv", csv.as_bytes())?;
    let reaching_cost = s.reaching_control.as_ref().map(|v| 0.5 * v.dot(v, &m.grid));
    Ok((
        EXIT_OK,
        json!({ "epsilon": sol.epsilon, "distance": sol.distance, "leader_cost": sol.leader_cost,
                "dual_value": sol.dual_value, "gap": sol.gap, "iterations": sol.iterations,
                "target_norm": norm_h(problem.target(), &m.grid), "beta0": problem.beta0,
                "reaching_control_cost": reaching_cost, "vi": vi, "stages": sol.stages }),
    ))
}

fn run_sweep(s: &Scenario, art: &mut Artifacts) -> Result<(i32, Value)> {
    let problem = leader_problem(s)?;
    let table = controllability_sweep(problem.target(), &s.config.epsilons, &problem, s.config.vi_samples)?;
    let mut csv = String::from("epsilon,distance,leader_cost,gap,vi_min,iters\n");
    for r in &table.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            csv_number(r.epsilon),
            csv_number(r.distance),
            csv_number(r.leader_cost),
            csv_number(r.gap),
            csv_number(r.vi_min),
            r.iters
        );
    }
    art.write("tables/sweep.csv", csv.as_bytes())?;
    Ok((
        if table.all_feasible { EXIT_OK } else { EXIT_CHECK_FAILED },
        json!(table),
    ))
}
