//! Scenario orchestration: wires plant, controller, filters, detector, game,
//! and sender into the per-step loop; emits CSV logs, plot-data series, and
//! text reports; hosts the CLI entry point.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use crate::analysis::{mse_series, theorem2_bound, BoundReport, MseSeries};
use crate::attacks::{produce_message, SenderKind};
use crate::config::{self, OnReject, Scenario, SenderSpec, ThresholdSpec};
use crate::detector::{chi2_statistic, classify, thresholds_from_confidence, DetectorConfig, Tier};
use crate::error::{Error, Result};
use crate::estimation::{
    load_residual, physical_filter, residual_covariance_analytic, residual_covariance_monte_carlo,
    save_residual, twin_filter, ResidualModel,
};
use crate::lqg::{control_law, solve_lqr, LqrSolution};
use crate::mathkit::{RngStream, SymMatrix};
use crate::plant::{PlantSim, PlantState};
use crate::sge::{
    belief_update, benign_strategy_profile, beta_range, beta_threshold, hedged_malicious_model,
    receiver_best_response, receiver_step_utility, sender_step_utility, verify_pooling_pbne,
    Belief, Identity, PbneReport, ReceiverAction, SenderStrategy,
};

/// Belief is kept inside the open unit interval, matching the codomain of
/// the update map.
const BELIEF_CLAMP: f64 = 1e-12;

/// RNG substream labels; one run never shares a stream between consumers.
const STREAM_INIT: u64 = 0;
const STREAM_PLANT: u64 = 1;
const STREAM_SENDER: u64 = 2;
const STREAM_CALIBRATION: u64 = 3;

/// One row of the per-step log.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub x_twin: DVector<f64>,
    pub m: DVector<f64>,
    pub u: DVector<f64>,
    pub chi2: f64,
    pub q: Tier,
    pub pi0: f64,
    pub action: ReceiverAction,
    pub u_sender: f64,
    pub u_receiver: f64,
}

/// Why a run stopped before its horizon.
#[derive(Debug, Clone)]
pub enum Abort {
    Divergence { step: usize, norm: f64 },
    Halted { step: usize },
}

/// Everything a finished (or aborted) run produces.
pub struct RunOutput {
    pub scenario_name: String,
    pub case: String,
    pub seed: u64,
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub burn_in: usize,
    pub records: Vec<RunRecord>,
    pub lqr: LqrSolution,
    pub residual: ResidualModel,
    pub p_hat_star: SymMatrix,
    pub p_tilde_star: SymMatrix,
    pub rho1: f64,
    pub rho2: f64,
    pub dof: u32,
    pub beta_range: (f64, f64),
    pub q_counts: [usize; 3],
    pub alarms: usize,
    pub cost: Option<f64>,
    pub mse: Option<MseSeries>,
    pub bound: BoundReport,
    pub aborted: Option<Abort>,
    pub reference: Option<crate::manipulator::HalfCircle>,
    pub dt: f64,
}

/// Shared synthesis artifacts for a scenario.
pub struct Setup {
    pub lqr: LqrSolution,
    pub detector: DetectorConfig,
    pub residual: ResidualModel,
    pub p_hat_star: SymMatrix,
    pub p_tilde_star: SymMatrix,
    pub sigma_benign: SenderStrategy,
    pub sigma_malicious_model: SenderStrategy,
    pub sender_kind: SenderKind,
    pub bound: BoundReport,
    pub beta_range: (f64, f64),
}

/// Synthesize the controller, calibrate the residual, derive thresholds and
/// profiles, and resolve the sender.
pub fn prepare(scenario: &Scenario) -> Result<Setup> {
    let plant = &scenario.plant;
    let lqr = solve_lqr(
        &plant.a,
        &plant.b,
        &scenario.weights,
        crate::lqg::DEFAULT_TOL,
        crate::lqg::DEFAULT_MAX_ITER,
    )?;
    plant.validate_with_gain(&lqr.k)?;

    let physical = physical_filter(plant, &lqr.k)?;
    let twin = twin_filter(plant, &lqr.k)?;
    let p_hat_star = physical.steady_state(1e-10, 10_000)?.p;
    let p_tilde_star = twin.steady_state(1e-10, 10_000)?.p;

    let residual = match &scenario.sigma_phi_artifact {
        Some(path) if path.exists() => load_residual(path)?,
        _ => residual_covariance_analytic(&physical, &twin, &lqr.k, &plant.b)?,
    };
    if residual.dim() != plant.n_x() {
        return Err(Error::Config(format!(
            "residual artifact dimension {} disagrees with the plant order {}",
            residual.dim(),
            plant.n_x()
        )));
    }

    let dof = plant.n_x() as u32;
    let (rho1, rho2) = match scenario.thresholds {
        ThresholdSpec::Confidence { p1, p2 } => thresholds_from_confidence(p1, p2, dof)?,
        ThresholdSpec::Explicit { rho1, rho2 } => (rho1, rho2),
    };
    let detector = DetectorConfig::new(rho1, rho2, dof, residual.clone())?;

    let sigma_benign = benign_strategy_profile(&detector)?;
    let sigma_malicious_model = hedged_malicious_model(&detector, scenario.attack_model_weight)?;

    let sender_kind = match &scenario.sender {
        SenderSpec::Benign => SenderKind::Benign,
        SenderSpec::Naive { bias, bias_scale } => {
            let bias = match bias {
                Some(b) => b.clone(),
                None => {
                    let mut b = DVector::zeros(plant.n_x());
                    b[0] = bias_scale * (rho2 * residual.lambda_max()).sqrt();
                    b
                }
            };
            SenderKind::Naive { bias }
        }
        SenderSpec::Stealthy { mode } => SenderKind::Stealthy { mode: *mode },
    };

    let bound = theorem2_bound(
        &p_hat_star,
        &p_tilde_star,
        &residual.sigma_phi,
        &scenario.weights.q,
        &scenario.weights.r,
        &lqr.k,
        rho1,
        rho2,
        dof,
    )?;
    let beta_range = beta_range(&scenario.receiver_weights)?;

    Ok(Setup {
        lqr,
        detector,
        residual,
        p_hat_star,
        p_tilde_star,
        sigma_benign,
        sigma_malicious_model,
        sender_kind,
        bound,
        beta_range,
    })
}

fn clamp_belief(pi0: f64) -> f64 {
    pi0.clamp(BELIEF_CLAMP, 1.0 - BELIEF_CLAMP)
}

/// Run one scenario to completion (or abort), producing the full log and
/// reports. Per step: the sender forms its message from the current
/// estimates, the detector scores it against the twin estimate, the
/// receiver updates its belief and acts, the controller applies the
/// accepted message (or the rejection policy), the plant emits observations
/// from the pre-transition state and steps, and both filters consume the
/// fresh observations.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput> {
    let setup = prepare(scenario)?;
    run_with_setup(scenario, setup)
}

fn run_with_setup(scenario: &Scenario, setup: Setup) -> Result<RunOutput> {
    let plant = &scenario.plant;
    let root = RngStream::new(scenario.seed);
    let mut rng_init = root.substream(STREAM_INIT);
    let mut rng_plant = root.substream(STREAM_PLANT);
    let mut rng_sender = root.substream(STREAM_SENDER);

    let sim = PlantSim::new(plant.clone())?;
    let mut state = match &scenario.fixed_x0 {
        Some(x0) => PlantState::new(x0.clone()),
        None => PlantState::sample_initial(plant, &mut rng_init)?,
    };
    let mut physical = physical_filter(plant, &setup.lqr.k)?;
    let mut twin = twin_filter(plant, &setup.lqr.k)?;

    let identity = if setup.sender_kind.is_malicious() {
        Identity::Malicious
    } else {
        Identity::Benign
    };
    let mut belief = Belief::new(clamp_belief(scenario.prior_belief))?;

    let mut records: Vec<RunRecord> = Vec::with_capacity(scenario.steps.min(1 << 22));
    let mut q_counts = [0usize; 3];
    let mut alarms = 0usize;
    let mut aborted = None;

    for k in 0..scenario.steps {
        let m = produce_message(
            &setup.sender_kind,
            &physical.x_est,
            &twin.x_est,
            Some(&setup.residual),
            Some(&setup.detector),
            &mut rng_sender,
        )?;
        let chi2 = chi2_statistic(&twin.x_est, &m, &setup.residual);
        let verdict = classify(chi2, &setup.detector);
        q_counts[verdict.q.as_u8() as usize] += 1;

        // message equal to the twin estimate leaves beta undefined (0/0);
        // both receiver losses vanish, so any non-detrimental message is
        // accepted
        let action = match beta_threshold(&twin.x_est, &m, &scenario.receiver_weights) {
            Ok(beta) => receiver_best_response(verdict.q, belief, beta),
            Err(_) if verdict.q != Tier::Detrimental => ReceiverAction::Accept,
            Err(_) => ReceiverAction::Reject,
        };
        if action == ReceiverAction::Reject {
            alarms += 1;
        }

        let u = match action {
            ReceiverAction::Accept => control_law(&setup.lqr.k, &m),
            ReceiverAction::Reject => match scenario.on_reject {
                OnReject::Fallback => control_law(&setup.lqr.k, &twin.x_est),
                OnReject::Freeze => DVector::zeros(plant.n_u()),
                OnReject::Halt => {
                    aborted = Some(Abort::Halted { step: k });
                    break;
                }
            },
        };

        belief = Belief::new(clamp_belief(
            belief_update(
                belief,
                verdict.q,
                &setup.sigma_benign,
                &setup.sigma_malicious_model,
            )?
            .pi0,
        ))?;

        let u_sender = sender_step_utility(identity, &m, &state.x, action);
        let u_receiver =
            receiver_step_utility(identity, &m, &twin.x_est, action, &scenario.receiver_weights);
        records.push(RunRecord {
            k,
            x: state.x.clone(),
            x_hat: physical.x_est.clone(),
            x_twin: twin.x_est.clone(),
            m,
            u: u.clone(),
            chi2,
            q: verdict.q,
            pi0: belief.pi0,
            action,
            u_sender,
            u_receiver,
        });

        let obs = sim.observe(&state, &mut rng_plant);
        match sim.transition(&state, &u, &mut rng_plant) {
            Ok(next) => state = next,
            Err(Error::Divergence { step, norm }) => {
                aborted = Some(Abort::Divergence { step, norm });
                break;
            }
            Err(e) => return Err(e),
        }
        physical.filter_step(&obs.y)?;
        twin.filter_step(&obs.z)?;
    }

    let steps_completed = records.len();
    let cost = if steps_completed > scenario.burn_in {
        Some(crate::analysis::empirical_cost(
            &records,
            &scenario.weights.q,
            &scenario.weights.r,
            scenario.burn_in,
        )?)
    } else {
        None
    };
    let mse = if steps_completed > 0 {
        Some(mse_series(&records, 100)?)
    } else {
        None
    };

    Ok(RunOutput {
        scenario_name: scenario.name.clone(),
        case: scenario.sender.case_name().to_string(),
        seed: scenario.seed,
        steps_requested: scenario.steps,
        steps_completed,
        burn_in: scenario.burn_in,
        records,
        lqr: setup.lqr,
        residual: setup.residual,
        p_hat_star: setup.p_hat_star,
        p_tilde_star: setup.p_tilde_star,
        rho1: setup.detector.rho1,
        rho2: setup.detector.rho2,
        dof: setup.detector.dof,
        beta_range: setup.beta_range,
        q_counts,
        alarms,
        cost,
        mse,
        bound: setup.bound,
        aborted,
        reference: scenario.reference,
        dt: plant.dt,
    })
}

// --- output emission ---------------------------------------------------------

fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn trajectory_csv(out: &RunOutput) -> String {
    let n_x = out
        .records
        .first()
        .map(|r| r.x.len())
        .unwrap_or_else(|| out.p_hat_star.dim());
    let n_u = out.records.first().map(|r| r.u.len()).unwrap_or(0);
    let mut header: Vec<String> = vec!["k".into()];
    for tag in ["x", "xhat", "xtilde", "m"] {
        for i in 1..=n_x {
            header.push(format!("{tag}{i}"));
        }
    }
    for i in 1..=n_u {
        header.push(format!("u{i}"));
    }
    for tag in ["chi2", "q", "pi0", "action", "us", "ur"] {
        header.push(tag.into());
    }
    let mut s = header.join(",");
    s.push('\n');
    for r in &out.records {
        let mut fields: Vec<String> = vec![r.k.to_string()];
        for v in [&r.x, &r.x_hat, &r.x_twin, &r.m] {
            for i in 0..v.len() {
                fields.push(fmt_float(v[i]));
            }
        }
        for i in 0..r.u.len() {
            fields.push(fmt_float(r.u[i]));
        }
        fields.push(fmt_float(r.chi2));
        fields.push(r.q.as_u8().to_string());
        fields.push(fmt_float(r.pi0));
        fields.push((r.action as u8).to_string());
        fields.push(fmt_float(r.u_sender));
        fields.push(fmt_float(r.u_receiver));
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

fn two_column_csv(header: (&str, &str), rows: impl Iterator<Item = (f64, f64)>) -> String {
    let mut s = format!("{},{}\n", header.0, header.1);
    for (a, b) in rows {
        let _ = writeln!(s, "{},{}", fmt_float(a), fmt_float(b));
    }
    s
}

fn summary_text(out: &RunOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "twin-sentinel run summary");
    let _ = writeln!(s, "scenario: {}", out.scenario_name);
    let _ = writeln!(s, "case: {}", out.case);
    let _ = writeln!(s, "seed: {}", out.seed);
    let _ = writeln!(
        s,
        "steps: {} completed of {} requested (burn-in {})",
        out.steps_completed, out.steps_requested, out.burn_in
    );
    match &out.aborted {
        Some(Abort::Divergence { step, norm }) => {
            let _ = writeln!(s, "aborted: divergence at step {step} (state norm {norm:.3e})");
        }
        Some(Abort::Halted { step }) => {
            let _ = writeln!(s, "aborted: halted on rejection at step {step}");
        }
        None => {}
    }
    let total: usize = out.q_counts.iter().sum();
    if total > 0 {
        let _ = writeln!(
            s,
            "verdicts: q0 {} ({:.4}), q1 {} ({:.4}), q2 {} ({:.4})",
            out.q_counts[0],
            out.q_counts[0] as f64 / total as f64,
            out.q_counts[1],
            out.q_counts[1] as f64 / total as f64,
            out.q_counts[2],
            out.q_counts[2] as f64 / total as f64,
        );
    }
    let _ = writeln!(s, "alarms (rejections): {}", out.alarms);
    let _ = writeln!(
        s,
        "thresholds: rho1 = {:.6}, rho2 = {:.6}, dof = {}",
        out.rho1, out.rho2, out.dof
    );
    let _ = writeln!(
        s,
        "beta range over message directions: [{:.6}, {:.6}]",
        out.beta_range.0, out.beta_range.1
    );
    let _ = writeln!(s, "tr(P_hat*) = {:.9e}", out.p_hat_star.trace());
    let _ = writeln!(s, "tr(P_twin*) = {:.9e}", out.p_tilde_star.trace());
    if let Some(cost) = out.cost {
        let _ = writeln!(s, "empirical quadratic cost (post burn-in): {:.9e}", cost);
    }
    if let Some(mse) = &out.mse {
        if let Ok((h, t, m)) = mse.means(out.burn_in.min(out.steps_completed.saturating_sub(1))) {
            let _ = writeln!(s, "mean MSE physical estimate: {h:.9e}");
            let _ = writeln!(s, "mean MSE twin estimate:     {t:.9e}");
            let _ = writeln!(s, "mean MSE message:           {m:.9e}");
        }
    }
    let _ = write!(s, "{}", out.bound);
    s
}

/// Write `trajectory.csv`, `summary.txt`, the persisted residual artifact,
/// and the `plotdata/` series. Returns the paths written.
pub fn emit_outputs(out: &RunOutput, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let traj = out_dir.join("trajectory.csv");
    write_file(&traj, &trajectory_csv(out))?;
    written.push(traj);

    let summary = out_dir.join("summary.txt");
    write_file(&summary, &summary_text(out))?;
    written.push(summary);

    let sigma = out_dir.join("sigma_phi.txt");
    if let Some(parent) = sigma.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    save_residual(&sigma, &out.scenario_name, out.seed, &out.residual)?;
    written.push(sigma);

    let plotdata = out_dir.join("plotdata");
    // panel (a): workspace overlays for the manipulator, leading state
    // component otherwise
    if let Some(reference) = &out.reference {
        let refs: Vec<(f64, f64)> = out
            .records
            .iter()
            .map(|r| {
                let (p, _, _) = reference.sample(r.k as f64 * out.dt);
                (p[0], p[1])
            })
            .collect();
        let series: [(&str, Box<dyn Fn(&RunRecord) -> (f64, f64)>); 4] = [
            ("panel_a_true.csv", Box::new(|r: &RunRecord| (r.x[0], r.x[1]))),
            ("panel_a_physical.csv", Box::new(|r: &RunRecord| (r.x_hat[0], r.x_hat[1]))),
            ("panel_a_twin.csv", Box::new(|r: &RunRecord| (r.x_twin[0], r.x_twin[1]))),
            ("panel_a_message.csv", Box::new(|r: &RunRecord| (r.m[0], r.m[1]))),
        ];
        let path = plotdata.join("panel_a_reference.csv");
        write_file(&path, &two_column_csv(("px", "py"), refs.iter().copied()))?;
        written.push(path);
        for (name, extract) in series {
            let path = plotdata.join(name);
            let rows = out.records.iter().zip(refs.iter()).map(|(r, (rx, ry))| {
                let (ex, ey) = extract(r);
                (rx + ex, ry + ey)
            });
            write_file(&path, &two_column_csv(("px", "py"), rows))?;
            written.push(path);
        }
    } else {
        for (name, extract) in [
            ("panel_a_true.csv", 0usize),
            ("panel_a_physical.csv", 1),
            ("panel_a_twin.csv", 2),
            ("panel_a_message.csv", 3),
        ] {
            let path = plotdata.join(name);
            let rows = out.records.iter().map(|r| {
                let v = match extract {
                    0 => r.x[0],
                    1 => r.x_hat[0],
                    2 => r.x_twin[0],
                    _ => r.m[0],
                };
                (r.k as f64, v)
            });
            write_file(&path, &two_column_csv(("k", "x1"), rows))?;
            written.push(path);
        }
    }
    let path = plotdata.join("panel_b_chi2.csv");
    write_file(
        &path,
        &two_column_csv(("k", "chi2"), out.records.iter().map(|r| (r.k as f64, r.chi2))),
    )?;
    written.push(path);
    let path = plotdata.join("panel_c_belief.csv");
    write_file(
        &path,
        &two_column_csv(("k", "pi0"), out.records.iter().map(|r| (r.k as f64, r.pi0))),
    )?;
    written.push(path);
    if let Some(mse) = &out.mse {
        for (name, idx) in [
            ("mse_window_physical.csv", 1usize),
            ("mse_window_twin.csv", 2),
            ("mse_window_message.csv", 3),
        ] {
            let path = plotdata.join(name);
            let rows = mse.windows.iter().map(|w| {
                let v = match idx {
                    1 => w.1,
                    2 => w.2,
                    _ => w.3,
                };
                (w.0 as f64, v)
            });
            write_file(&path, &two_column_csv(("k", "mse"), rows))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Pooling-equilibrium report for the scenario's profiles at its prior.
pub fn pbne_report(scenario: &Scenario) -> Result<PbneReport> {
    let setup = prepare(scenario)?;
    let sigma_stealthy = crate::sge::stealthy_strategy_profile(&setup.detector)?;
    verify_pooling_pbne(
        &setup.sigma_benign,
        &sigma_stealthy,
        scenario.prior_belief,
        setup.beta_range.1,
    )
}

// --- CLI ---------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "twin-sentinel",
    about = "Digital-twin monitored control loop with a tiered chi-square detector and evidence-game defense",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one case study and write its logs and reports
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["none", "naive", "stealthy"])]
        case: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate the residual covariance and write the artifact
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// use a seeded benign run instead of the analytic construction
        #[arg(long)]
        monte_carlo: bool,
        /// monte-carlo sample count
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the loss bound for the scenario
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify the pooling equilibrium and write the report
    Pbne {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all three cases with a matched seed and compare
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_out_dir(flag: Option<PathBuf>, scenario: &Scenario) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    if let Ok(env) = std::env::var("TWIN_SENTINEL_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    scenario
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("twin-sentinel-out"))
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => 2,
        _ => 1,
    }
}

fn load_with_overrides(
    config: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<Scenario> {
    let mut scenario = config::load_scenario(config)?;
    if let Some(s) = steps {
        scenario.steps = s;
    }
    if let Some(s) = seed {
        scenario.seed = s;
    }
    Ok(scenario)
}

fn cmd_simulate(
    config: &Path,
    case: &str,
    steps: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<i32> {
    let scenario = load_with_overrides(config, steps, seed)?.with_case(case)?;
    let out_dir = resolve_out_dir(out, &scenario);
    let result = run_scenario(&scenario)?;
    emit_outputs(&result, &out_dir)?;
    println!(
        "case {} finished: {} steps, q = [{}, {}, {}], alarms = {}, outputs in {}",
        result.case,
        result.steps_completed,
        result.q_counts[0],
        result.q_counts[1],
        result.q_counts[2],
        result.alarms,
        out_dir.display()
    );
    if let Some(Abort::Divergence { step, norm }) = result.aborted {
        eprintln!("run diverged at step {step} (norm {norm:.3e}); partial log flushed");
        return Ok(2);
    }
    Ok(0)
}

fn cmd_calibrate(config: &Path, monte_carlo: bool, steps: usize, out: Option<PathBuf>) -> Result<i32> {
    let scenario = config::load_scenario(config)?;
    let out_dir = resolve_out_dir(out, &scenario);
    let residual = if monte_carlo {
        let lqr = solve_lqr(
            &scenario.plant.a,
            &scenario.plant.b,
            &scenario.weights,
            crate::lqg::DEFAULT_TOL,
            crate::lqg::DEFAULT_MAX_ITER,
        )?;
        let mut rng = RngStream::new(scenario.seed).substream(STREAM_CALIBRATION);
        residual_covariance_monte_carlo(&scenario.plant, &lqr.k, steps, &mut rng)?
    } else {
        let setup = prepare(&scenario)?;
        setup.residual
    };
    let path = out_dir.join("sigma_phi.txt");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    save_residual(&path, &scenario.name, scenario.seed, &residual)?;
    println!(
        "residual calibrated ({}), lambda_max = {:.6e}, written to {}",
        residual.source.as_str(),
        residual.lambda_max(),
        path.display()
    );
    Ok(0)
}

fn cmd_bound(config: &Path, out: Option<PathBuf>) -> Result<i32> {
    let scenario = config::load_scenario(config)?;
    let out_dir = resolve_out_dir(out, &scenario);
    let setup = prepare(&scenario)?;
    let text = format!("{}", setup.bound);
    let path = out_dir.join("bound.txt");
    write_file(&path, &text)?;
    print!("{text}");
    println!("written to {}", path.display());
    Ok(0)
}

fn cmd_pbne(config: &Path, out: Option<PathBuf>) -> Result<i32> {
    let scenario = config::load_scenario(config)?;
    let out_dir = resolve_out_dir(out, &scenario);
    let report = pbne_report(&scenario)?;
    let text = format!("{report}");
    let path = out_dir.join("pbne.txt");
    write_file(&path, &text)?;
    print!("{text}");
    println!("written to {}", path.display());
    Ok(0)
}

fn cmd_compare(
    config: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<i32> {
    let base = load_with_overrides(config, steps, seed)?;
    let out_dir = resolve_out_dir(out, &base);
    let mut rows = Vec::new();
    let mut costs = Vec::new();
    let mut bound_text = String::new();
    for case in ["none", "naive", "stealthy"] {
        let scenario = base.clone().with_case(case)?;
        let result = run_scenario(&scenario)?;
        emit_outputs(&result, &out_dir.join(case))?;
        let mse = result
            .mse
            .as_ref()
            .and_then(|m| m.means(result.burn_in.min(result.steps_completed.saturating_sub(1))).ok());
        rows.push((
            case.to_string(),
            result.steps_completed,
            mse,
            result.q_counts,
            result.alarms,
            result.aborted.is_some(),
        ));
        costs.push((case.to_string(), result.cost));
        if case == "none" {
            bound_text = format!("{}", result.bound);
        }
    }
    let mut table = String::new();
    let _ = writeln!(table, "matched-seed comparison (seed {})", base.seed);
    let _ = writeln!(
        table,
        "{:<10} {:>9} {:>15} {:>15} {:>15} {:>8} {:>8}",
        "case", "steps", "mse_physical", "mse_twin", "mse_message", "alarms", "aborted"
    );
    for (case, n, mse, _q, alarms, ab) in &rows {
        let (h, t, m) = mse.unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        let _ = writeln!(
            table,
            "{case:<10} {n:>9} {h:>15.6e} {t:>15.6e} {m:>15.6e} {alarms:>8} {ab:>8}"
        );
    }
    let j0 = costs.iter().find(|(c, _)| c == "none").and_then(|(_, v)| *v);
    let j1 = costs
        .iter()
        .find(|(c, _)| c == "stealthy")
        .and_then(|(_, v)| *v);
    if let (Some(j0), Some(j1)) = (j0, j1) {
        let _ = writeln!(table, "J0 (none) = {j0:.9e}");
        let _ = writeln!(table, "J1 (stealthy) = {j1:.9e}");
        let _ = writeln!(table, "delta J = {:.9e}", j1 - j0);
    }
    let _ = write!(table, "{bound_text}");
    let path = out_dir.join("mse_table.txt");
    write_file(&path, &table)?;
    print!("{table}");
    println!("written to {}", path.display());
    Ok(0)
}

/// CLI entry point; returns the process exit code. Exit 0 on success, 1 on
/// configuration or usage errors, 2 on runtime divergence.
pub fn cli_main(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let outcome = match cli.command {
        Command::Simulate {
            config,
            case,
            steps,
            seed,
            out,
        } => cmd_simulate(&config, &case, steps, seed, out),
        Command::Calibrate {
            config,
            monte_carlo,
            steps,
            out,
        } => cmd_calibrate(&config, monte_carlo, steps, out),
        Command::Bound { config, out } => cmd_bound(&config, out),
        Command::Pbne { config, out } => cmd_pbne(&config, out),
        Command::Compare {
            config,
            steps,
            seed,
            out,
        } => cmd_compare(&config, steps, seed, out),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_scenario;

    fn small_scenario(case: &str, steps: usize, seed: u64) -> Scenario {
        let text = config::manipulator_default_toml()
            .replace("steps = 10000", &format!("steps = {steps}"))
            .replace("seed = 42", &format!("seed = {seed}"));
        parse_scenario(&text).unwrap().with_case(case).unwrap()
    }

    #[test]
    fn prefix_stability_messages_never_read_the_future() {
        let long = run_scenario(&small_scenario("stealthy", 300, 5)).unwrap();
        let short = run_scenario(&small_scenario("stealthy", 100, 5)).unwrap();
        assert_eq!(short.records.len(), 100);
        for (a, b) in short.records.iter().zip(long.records.iter()) {
            assert_eq!(a.m, b.m, "message diverged at step {}", a.k);
            assert_eq!(a.q, b.q);
            assert_eq!(a.u, b.u);
        }
    }

    #[test]
    fn rejected_steps_exclude_the_message_from_control() {
        let out = run_scenario(&small_scenario("naive", 300, 7)).unwrap();
        let mut saw_reject = false;
        for r in &out.records {
            if r.action == ReceiverAction::Reject {
                saw_reject = true;
                let fallback = &out.lqr.k * &r.x_twin;
                assert!((&r.u - fallback).amax() < 1e-12);
                let from_message = &out.lqr.k * &r.m;
                assert!((&r.u - from_message).amax() > 1e-9);
            }
        }
        assert!(saw_reject, "naive run should reject");
        assert_eq!(out.alarms, out.records.iter().filter(|r| r.action == ReceiverAction::Reject).count());
    }

    #[test]
    fn benign_short_run_keeps_belief_in_the_acceptance_band() {
        let out = run_scenario(&small_scenario("none", 500, 42)).unwrap();
        assert!(out.aborted.is_none());
        for r in &out.records {
            assert!(r.pi0 >= 0.6, "belief dipped to {} at step {}", r.pi0, r.k);
        }
    }

    #[test]
    fn naive_run_collapses_belief() {
        let out = run_scenario(&small_scenario("naive", 400, 11)).unwrap();
        let first_q2 = out.records.iter().position(|r| r.q == Tier::Detrimental);
        assert!(first_q2.is_some());
        let last = out.records.last().unwrap();
        assert!(last.pi0 < 0.65);
    }

    #[test]
    fn csv_schema_column_count() {
        // synthetic n_x = 4, n_u = 1 system: 1 + 16 + 1 + 6 = 24 columns
        let text = r#"
[scenario]
name = "custom"
steps = 3
seed = 9
burn_in = 0

[plant]
a = [[0.5, 0.0, 0.0, 0.0],[0.0, 0.5, 0.0, 0.0],[0.0, 0.0, 0.5, 0.0],[0.0, 0.0, 0.0, 0.5]]
b = [[1.0],[0.0],[0.0],[1.0]]
c = [[1.0,0.0,0.0,0.0],[0.0,1.0,0.0,0.0],[0.0,0.0,1.0,0.0],[0.0,0.0,0.0,1.0]]
d = [[1.0,0.0,0.0,0.0],[0.0,1.0,0.0,0.0]]
sigma_x = [[0.01,0,0,0],[0,0.01,0,0],[0,0,0.01,0],[0,0,0,0.01]]
sigma_w = [[0.01,0,0,0],[0,0.01,0,0],[0,0,0.01,0],[0,0,0,0.01]]
sigma_v = [[0.01,0,0,0],[0,0.01,0,0],[0,0,0.01,0],[0,0,0,0.01]]
sigma_d = [[0.04,0],[0,0.04]]

[detector]
confidence = [0.95, 0.999]
"#;
        let scenario = parse_scenario(text).unwrap();
        let out = run_scenario(&scenario).unwrap();
        let csv = trajectory_csv(&out);
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), 24);
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn empty_record_list_yields_header_only_csv() {
        let scenario = small_scenario("none", 50, 3);
        let mut out = run_scenario(&scenario).unwrap();
        out.records.clear();
        let csv = trajectory_csv(&out);
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("k,x1"));
    }

    #[test]
    fn same_seed_byte_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        for d in [&a, &b] {
            let out = run_scenario(&small_scenario("stealthy", 200, 31)).unwrap();
            emit_outputs(&out, d).unwrap();
        }
        let fa = std::fs::read(a.join("trajectory.csv")).unwrap();
        let fb = std::fs::read(b.join("trajectory.csv")).unwrap();
        assert_eq!(fa, fb);
        let sa = std::fs::read(a.join("summary.txt")).unwrap();
        let sb = std::fs::read(b.join("summary.txt")).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn halt_policy_stops_on_first_rejection() {
        let text = config::manipulator_default_toml()
            .replace("steps = 10000", "steps = 400")
            .replace("on_reject = \"fallback\"", "on_reject = \"halt\"");
        let scenario = parse_scenario(&text).unwrap().with_case("naive").unwrap();
        let out = run_scenario(&scenario).unwrap();
        assert!(matches!(out.aborted, Some(Abort::Halted { .. })));
        assert!(out.steps_completed < 400);
    }
}
