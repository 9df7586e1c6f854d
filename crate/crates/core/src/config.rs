//! Scenario configuration: TOML schema, validation, and resolution into the
//! concrete plant, weights, thresholds, and sender used by the run loop.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::attacks::StealthyMode;
use crate::error::{Error, Result};
use crate::lqg::LqrWeights;
use crate::manipulator::{build_scenario, HalfCircle, NoiseConfig, RobotParams};
use crate::mathkit::SymMatrix;
use crate::plant::PlantModel;
use crate::sge::ReceiverWeights;

/// What the controller applies when the receiver rejects a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnReject {
    /// `u = K x_twin` (default): the loop stays measurable.
    Fallback,
    /// `u = 0`.
    Freeze,
    /// Abort the run at the first rejection.
    Halt,
}

/// Threshold specification: confidence levels or explicit values,
/// exactly one of the two.
#[derive(Debug, Clone, Copy)]
pub enum ThresholdSpec {
    Confidence { p1: f64, p2: f64 },
    Explicit { rho1: f64, rho2: f64 },
}

/// Who sends the message. Naive bias may be given explicitly or derived
/// from the calibrated residual (`bias_scale * sqrt(rho2 * lambda_max)` in
/// the first coordinate).
#[derive(Debug, Clone)]
pub enum SenderSpec {
    Benign,
    Naive {
        bias: Option<DVector<f64>>,
        bias_scale: f64,
    },
    Stealthy {
        mode: StealthyMode,
    },
}

impl SenderSpec {
    pub fn case_name(&self) -> &'static str {
        match self {
            SenderSpec::Benign => "none",
            SenderSpec::Naive { .. } => "naive",
            SenderSpec::Stealthy { .. } => "stealthy",
        }
    }
}

/// Fully resolved scenario ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantModel,
    pub reference: Option<HalfCircle>,
    pub robot: Option<RobotParams>,
    pub weights: LqrWeights,
    pub receiver_weights: ReceiverWeights,
    pub thresholds: ThresholdSpec,
    pub prior_belief: f64,
    pub sender: SenderSpec,
    pub steps: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub on_reject: OnReject,
    pub out_dir: Option<PathBuf>,
    pub sigma_phi_artifact: Option<PathBuf>,
    pub fixed_x0: Option<DVector<f64>>,
    /// Receiver's hedge weight toward an undisguised attacker in its
    /// malicious-sender model (see the run loop's belief update).
    pub attack_model_weight: f64,
}

// --- raw TOML schema --------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: RawScenario,
    #[serde(default)]
    plant: Option<RawPlant>,
    #[serde(default)]
    manipulator: Option<RawManipulator>,
    #[serde(default)]
    noise: Option<RawNoise>,
    #[serde(default)]
    weights: Option<RawWeights>,
    detector: RawDetector,
    #[serde(default)]
    sender: Option<RawSender>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    steps: usize,
    seed: u64,
    #[serde(default = "default_burn_in")]
    burn_in: usize,
    #[serde(default)]
    dt: Option<f64>,
    #[serde(default = "default_prior")]
    prior_belief: f64,
    #[serde(default)]
    out_dir: Option<String>,
    #[serde(default = "default_on_reject")]
    on_reject: String,
    #[serde(default)]
    sigma_phi_artifact: Option<String>,
    #[serde(default)]
    fixed_x0: Option<Vec<f64>>,
}

fn default_burn_in() -> usize {
    200
}

fn default_prior() -> f64 {
    0.8
}

fn default_on_reject() -> String {
    "fallback".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
    sigma_x: Vec<Vec<f64>>,
    sigma_w: Vec<Vec<f64>>,
    sigma_v: Vec<Vec<f64>>,
    sigma_d: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManipulator {
    #[serde(default)]
    l1: Option<f64>,
    #[serde(default)]
    l2: Option<f64>,
    #[serde(default)]
    r1: Option<f64>,
    #[serde(default)]
    r2: Option<f64>,
    #[serde(default)]
    eta1: Option<f64>,
    #[serde(default)]
    eta2: Option<f64>,
    #[serde(default)]
    i1: Option<f64>,
    #[serde(default)]
    i2: Option<f64>,
    #[serde(default)]
    circle_center: Option<[f64; 2]>,
    #[serde(default)]
    circle_radius: Option<f64>,
    #[serde(default)]
    circle_duration: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    #[serde(default)]
    sigma_x: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    sigma_w: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    sigma_v: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    sigma_d: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MatrixOrScale {
    Scale(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    #[serde(default)]
    q: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    r: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    receiver_q0: Option<MatrixOrScale>,
    #[serde(default)]
    receiver_q1: Option<MatrixOrScale>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetector {
    #[serde(default)]
    confidence: Option<[f64; 2]>,
    #[serde(default)]
    thresholds: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSender {
    #[serde(default = "default_kind")]
    kind: String,
    #[serde(default)]
    bias: Option<Vec<f64>>,
    #[serde(default = "default_bias_scale")]
    bias_scale: f64,
    #[serde(default = "default_stealthy_mode")]
    stealthy_mode: String,
    #[serde(default = "default_attack_model_weight")]
    attack_model_weight: f64,
}

fn default_kind() -> String {
    "benign".into()
}

fn default_bias_scale() -> f64 {
    5.0
}

fn default_stealthy_mode() -> String {
    "banded".into()
}

fn default_attack_model_weight() -> f64 {
    0.01
}

impl Default for RawSender {
    fn default() -> Self {
        RawSender {
            kind: default_kind(),
            bias: None,
            bias_scale: default_bias_scale(),
            stealthy_mode: default_stealthy_mode(),
            attack_model_weight: default_attack_model_weight(),
        }
    }
}

// --- validation -------------------------------------------------------------

fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Config(format!("matrix {name} must be non-empty")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("matrix {name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn sym_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<SymMatrix> {
    SymMatrix::new(matrix_from_rows(name, rows)?)
        .map_err(|e| Error::Config(format!("matrix {name}: {e}")))
}

fn receiver_weight(name: &str, dim: usize, raw: &Option<MatrixOrScale>, default_scale: f64) -> Result<SymMatrix> {
    match raw {
        None => Ok(SymMatrix::scaled_identity(dim, default_scale)),
        Some(MatrixOrScale::Scale(s)) => {
            if *s <= 0.0 {
                return Err(Error::Config(format!("{name} scale must be positive")));
            }
            Ok(SymMatrix::scaled_identity(dim, *s))
        }
        Some(MatrixOrScale::Matrix(rows)) => sym_from_rows(name, rows),
    }
}

/// Parse and validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_scenario(&text)
}

/// Parse and validate scenario TOML text.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse failure: {e}")))?;

    let thresholds = match (raw.detector.confidence, raw.detector.thresholds) {
        (Some([p1, p2]), None) => {
            if !(0.0 < p1 && p1 < p2 && p2 < 1.0) {
                return Err(Error::Config(format!(
                    "confidence levels must satisfy 0 < p1 < p2 < 1, got {p1}, {p2}"
                )));
            }
            ThresholdSpec::Confidence { p1, p2 }
        }
        (None, Some([rho1, rho2])) => {
            if !(0.0 < rho1 && rho1 < rho2) {
                return Err(Error::Config(format!(
                    "thresholds must satisfy 0 < rho1 < rho2, got {rho1}, {rho2}"
                )));
            }
            ThresholdSpec::Explicit { rho1, rho2 }
        }
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give exactly one of detector.confidence and detector.thresholds, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config(
                "detector requires either confidence levels or explicit thresholds".into(),
            ))
        }
    };

    let on_reject = match raw.scenario.on_reject.as_str() {
        "fallback" => OnReject::Fallback,
        "freeze" => OnReject::Freeze,
        "halt" => OnReject::Halt,
        other => {
            return Err(Error::Config(format!(
                "on_reject must be fallback|freeze|halt, got {other}"
            )))
        }
    };

    if !(0.0..=1.0).contains(&raw.scenario.prior_belief) {
        return Err(Error::Config(format!(
            "prior_belief must lie in [0,1], got {}",
            raw.scenario.prior_belief
        )));
    }

    let (plant, reference, robot) = match raw.scenario.name.as_str() {
        "manipulator" => {
            let m = raw.manipulator;
            let get = |v: Option<f64>, d: f64| v.unwrap_or(d);
            let defaults = RobotParams::table_defaults();
            let params = RobotParams::new(
                get(m.as_ref().and_then(|m| m.l1), defaults.l1),
                get(m.as_ref().and_then(|m| m.l2), defaults.l2),
                get(m.as_ref().and_then(|m| m.r1), defaults.r1),
                get(m.as_ref().and_then(|m| m.r2), defaults.r2),
                get(m.as_ref().and_then(|m| m.eta1), defaults.eta1),
                get(m.as_ref().and_then(|m| m.eta2), defaults.eta2),
                get(m.as_ref().and_then(|m| m.i1), defaults.i1),
                get(m.as_ref().and_then(|m| m.i2), defaults.i2),
            )?;
            let default_circle = HalfCircle::default();
            let circle = HalfCircle {
                center: m
                    .as_ref()
                    .and_then(|m| m.circle_center)
                    .map(|c| nalgebra::Vector2::new(c[0], c[1]))
                    .unwrap_or(default_circle.center),
                radius: get(m.as_ref().and_then(|m| m.circle_radius), default_circle.radius),
                duration: get(
                    m.as_ref().and_then(|m| m.circle_duration),
                    default_circle.duration,
                ),
                start_angle: default_circle.start_angle,
            };
            let defaults = NoiseConfig::defaults();
            let pick = |name: &str, o: &Option<Vec<Vec<f64>>>, d: &SymMatrix| -> Result<SymMatrix> {
                match o {
                    Some(rows) => sym_from_rows(name, rows),
                    None => Ok(d.clone()),
                }
            };
            let noise = match &raw.noise {
                Some(n) => NoiseConfig {
                    sigma_x: pick("noise.sigma_x", &n.sigma_x, &defaults.sigma_x)?,
                    sigma_w: pick("noise.sigma_w", &n.sigma_w, &defaults.sigma_w)?,
                    sigma_v: pick("noise.sigma_v", &n.sigma_v, &defaults.sigma_v)?,
                    sigma_d: pick("noise.sigma_d", &n.sigma_d, &defaults.sigma_d)?,
                },
                None => defaults,
            };
            let dt = raw.scenario.dt.unwrap_or(0.01);
            if dt <= 0.0 {
                return Err(Error::Config(format!("dt must be positive, got {dt}")));
            }
            let scenario = build_scenario(params, dt, circle, noise)?;
            (scenario.plant, Some(scenario.reference), Some(scenario.params))
        }
        "custom" => {
            let p = raw
                .plant
                .as_ref()
                .ok_or_else(|| Error::Config("custom scenario requires a [plant] block".into()))?;
            let a = matrix_from_rows("plant.a", &p.a)?;
            let b = matrix_from_rows("plant.b", &p.b)?;
            let c = matrix_from_rows("plant.c", &p.c)?;
            let d = matrix_from_rows("plant.d", &p.d)?;
            let plant = PlantModel::new(
                a,
                b,
                c,
                d,
                sym_from_rows("plant.sigma_x", &p.sigma_x)?,
                sym_from_rows("plant.sigma_w", &p.sigma_w)?,
                sym_from_rows("plant.sigma_v", &p.sigma_v)?,
                sym_from_rows("plant.sigma_d", &p.sigma_d)?,
                raw.scenario.dt.unwrap_or(1.0),
            )?;
            (plant, None, None)
        }
        other => {
            return Err(Error::Config(format!(
                "scenario.name must be manipulator|custom, got {other}"
            )))
        }
    };

    let n_x = plant.n_x();
    let n_u = plant.n_u();
    let w = raw.weights.as_ref();
    let q = match w.and_then(|w| w.q.as_ref()) {
        Some(rows) => sym_from_rows("weights.q", rows)?,
        None => SymMatrix::identity(n_x),
    };
    let r = match w.and_then(|w| w.r.as_ref()) {
        Some(rows) => sym_from_rows("weights.r", rows)?,
        None => SymMatrix::identity(n_u),
    };
    if q.dim() != n_x || r.dim() != n_u {
        return Err(Error::Config("weight dimensions disagree with the plant".into()));
    }
    let weights = LqrWeights::new(q, r)?;
    let q0 = receiver_weight("weights.receiver_q0", n_x, &w.and_then(|w| w.receiver_q0.as_ref()).cloned(), 0.35)?;
    let q1 = receiver_weight("weights.receiver_q1", n_x, &w.and_then(|w| w.receiver_q1.as_ref()).cloned(), 0.65)?;
    let receiver_weights = ReceiverWeights::new(q0, q1)?;

    let sender_raw = raw.sender.unwrap_or_default();
    if !(0.0..=1.0).contains(&sender_raw.attack_model_weight) {
        return Err(Error::Config(format!(
            "attack_model_weight must lie in [0,1], got {}",
            sender_raw.attack_model_weight
        )));
    }
    let sender = sender_spec_from(&sender_raw, n_x)?;

    let fixed_x0 = match &raw.scenario.fixed_x0 {
        Some(v) => {
            if v.len() != n_x {
                return Err(Error::Config(format!(
                    "fixed_x0 has len {}, plant order is {n_x}",
                    v.len()
                )));
            }
            Some(DVector::from_row_slice(v))
        }
        None => None,
    };

    Ok(Scenario {
        name: raw.scenario.name,
        plant,
        reference,
        robot,
        weights,
        receiver_weights,
        thresholds,
        prior_belief: raw.scenario.prior_belief,
        sender,
        steps: raw.scenario.steps,
        burn_in: raw.scenario.burn_in,
        seed: raw.scenario.seed,
        on_reject,
        out_dir: raw.scenario.out_dir.map(PathBuf::from),
        sigma_phi_artifact: raw.scenario.sigma_phi_artifact.map(PathBuf::from),
        fixed_x0,
        attack_model_weight: sender_raw.attack_model_weight,
    })
}

fn sender_spec_from(raw: &RawSender, n_x: usize) -> Result<SenderSpec> {
    match raw.kind.as_str() {
        "benign" | "none" => Ok(SenderSpec::Benign),
        "naive" => {
            let bias = match &raw.bias {
                Some(v) => {
                    if v.len() != n_x {
                        return Err(Error::Config(format!(
                            "sender.bias has len {}, plant order is {n_x}",
                            v.len()
                        )));
                    }
                    Some(DVector::from_row_slice(v))
                }
                None => None,
            };
            if bias.is_none() && raw.bias_scale <= 0.0 {
                return Err(Error::Config("naive sender needs bias or a positive bias_scale".into()));
            }
            Ok(SenderSpec::Naive {
                bias,
                bias_scale: raw.bias_scale,
            })
        }
        "stealthy" => {
            let mode = match raw.stealthy_mode.as_str() {
                "banded" => StealthyMode::BandedRho1Rho2,
                "inner" => StealthyMode::InnerRho1,
                other => {
                    return Err(Error::Config(format!(
                        "stealthy_mode must be banded|inner, got {other}"
                    )))
                }
            };
            Ok(SenderSpec::Stealthy { mode })
        }
        other => Err(Error::Config(format!(
            "sender.kind must be benign|naive|stealthy, got {other}"
        ))),
    }
}

impl Scenario {
    /// Replace the sender with the CLI-selected case.
    pub fn with_case(mut self, case: &str) -> Result<Self> {
        self.sender = match case {
            "none" => SenderSpec::Benign,
            "naive" => match self.sender {
                SenderSpec::Naive { bias, bias_scale } => SenderSpec::Naive { bias, bias_scale },
                _ => SenderSpec::Naive {
                    bias: None,
                    bias_scale: 5.0,
                },
            },
            "stealthy" => match self.sender {
                SenderSpec::Stealthy { mode } => SenderSpec::Stealthy { mode },
                _ => SenderSpec::Stealthy {
                    mode: StealthyMode::BandedRho1Rho2,
                },
            },
            other => {
                return Err(Error::Config(format!(
                    "case must be none|naive|stealthy, got {other}"
                )))
            }
        };
        Ok(self)
    }
}

/// The shipped default manipulator scenario.
pub fn manipulator_default_toml() -> &'static str {
    r#"[scenario]
name = "manipulator"
steps = 10000
burn_in = 200
seed = 42
dt = 0.01
prior_belief = 0.8
on_reject = "fallback"

[detector]
confidence = [0.95, 0.999]

[sender]
kind = "benign"
bias_scale = 5.0
stealthy_mode = "banded"
attack_model_weight = 0.01

[weights]
receiver_q0 = 0.35
receiver_q1 = 0.65
"#
}
