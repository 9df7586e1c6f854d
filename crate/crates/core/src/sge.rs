//! Signaling game with evidence: sender identities, per-step utilities, the
//! receiver's belief threshold `beta`, Bayesian belief updates over detector
//! tiers, the per-identity evidence profiles, and pooling-equilibrium
//! verification.

use std::fmt;

use nalgebra::DVector;

use crate::detector::{DetectorConfig, Tier};
use crate::error::{Error, Result};
use crate::mathkit::chi_square_cdf;

/// Sender identity: the estimator is either benign or compromised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Identity {
    Benign,
    Malicious,
}

/// Receiver action on a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceiverAction {
    Reject = 0,
    Accept = 1,
}

impl ReceiverAction {
    pub fn accepted(self) -> bool {
        self == ReceiverAction::Accept
    }
}

/// Receiver loss weights; both positive definite. Isotropic choices make the
/// acceptance threshold `beta` message-independent.
#[derive(Debug, Clone)]
pub struct ReceiverWeights {
    pub q0: crate::mathkit::SymMatrix,
    pub q1: crate::mathkit::SymMatrix,
}

impl ReceiverWeights {
    pub fn new(q0: crate::mathkit::SymMatrix, q1: crate::mathkit::SymMatrix) -> Result<Self> {
        if q0.dim() != q1.dim() {
            return Err(Error::Dimension("receiver weights must share a dimension".into()));
        }
        if !q0.is_pd(1e-12) || !q1.is_pd(1e-12) {
            return Err(Error::Numerical("receiver weights must be positive definite".into()));
        }
        Ok(ReceiverWeights { q0, q1 })
    }
}

/// Receiver's probability that the sender is benign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Belief {
    pub pi0: f64,
}

impl Belief {
    pub fn new(pi0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&pi0) {
            return Err(Error::Domain(format!("belief must lie in [0,1], got {pi0}")));
        }
        Ok(Belief { pi0 })
    }
}

/// A mixed strategy over the three evidence tiers for one identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SenderStrategy {
    pub mass: [f64; 3],
}

impl SenderStrategy {
    pub fn new(mass: [f64; 3]) -> Result<Self> {
        if mass.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain("strategy masses must lie in [0,1]".into()));
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "strategy masses must sum to 1, got {sum}"
            )));
        }
        Ok(SenderStrategy { mass })
    }

    pub fn prob(&self, q: Tier) -> f64 {
        self.mass[q.as_u8() as usize]
    }
}

/// Per-step realized utilities for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepUtilities {
    pub u_sender: f64,
    pub u_receiver: f64,
}

/// Acceptance threshold `beta = d' Q1 d / d' (Q0 + Q1) d` with
/// `d = x_twin - m`. Undefined for `d = 0`; the receiver then accepts any
/// non-detrimental message since both losses vanish.
pub fn beta_threshold(
    x_twin: &DVector<f64>,
    m: &DVector<f64>,
    weights: &ReceiverWeights,
) -> Result<f64> {
    let d = x_twin - m;
    let denom = (d.transpose() * (weights.q0.as_matrix() + weights.q1.as_matrix()) * &d)[0];
    if denom <= 0.0 {
        return Err(Error::Domain(
            "beta is undefined for a message equal to the twin estimate".into(),
        ));
    }
    let num = (d.transpose() * weights.q1.as_matrix() * &d)[0];
    Ok(num / denom)
}

/// Receiver's pure best response: reject detrimental evidence outright,
/// otherwise accept exactly when the belief clears the threshold
/// (the boundary `pi0 = beta` accepts).
pub fn receiver_best_response(q: Tier, belief: Belief, beta: f64) -> ReceiverAction {
    match q {
        Tier::Detrimental => ReceiverAction::Reject,
        _ if belief.pi0 >= beta => ReceiverAction::Accept,
        _ => ReceiverAction::Reject,
    }
}

/// Bayes update of the benign-identity belief given an observed tier.
/// A zero-likelihood tier under exactly one identity forces the belief onto
/// the other; zero likelihood under both is an undefined update.
pub fn belief_update(
    prior: Belief,
    q: Tier,
    sigma_benign: &SenderStrategy,
    sigma_malicious: &SenderStrategy,
) -> Result<Belief> {
    let sb = sigma_benign.prob(q);
    let sm = sigma_malicious.prob(q);
    let num = sb * prior.pi0;
    let denom = num + sm * (1.0 - prior.pi0);
    if denom <= 0.0 {
        return if sb > 0.0 {
            Belief::new(1.0)
        } else if sm > 0.0 {
            Belief::new(0.0)
        } else {
            Err(Error::Domain(format!(
                "belief update undefined: tier {} has zero likelihood under both identities",
                q.as_u8()
            )))
        };
    }
    Belief::new(num / denom)
}

/// Benign sender's induced evidence distribution:
/// `(F(rho1,n), F(rho2,n) - F(rho1,n), 1 - F(rho2,n))`.
pub fn benign_strategy_profile(cfg: &DetectorConfig) -> Result<SenderStrategy> {
    let f1 = chi_square_cdf(cfg.rho1, cfg.dof)?;
    let f2 = chi_square_cdf(cfg.rho2, cfg.dof)?;
    SenderStrategy::new([f1, f2 - f1, 1.0 - f2])
}

/// Stealthy sender's evidence distribution:
/// `(F(rho1,n), 1 - F(rho1,n), 0)` - no mass on detrimental evidence.
pub fn stealthy_strategy_profile(cfg: &DetectorConfig) -> Result<SenderStrategy> {
    let f1 = chi_square_cdf(cfg.rho1, cfg.dof)?;
    SenderStrategy::new([f1, 1.0 - f1, 0.0])
}

/// Receiver-side model of the malicious sender: the stealthy equilibrium
/// profile hedged with weight `omega` toward an undisguised attacker that
/// lands on detrimental evidence. `omega = 0` recovers the literal stealthy
/// profile.
pub fn hedged_malicious_model(cfg: &DetectorConfig, omega: f64) -> Result<SenderStrategy> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Domain(format!("hedge weight must lie in [0,1], got {omega}")));
    }
    let stealthy = stealthy_strategy_profile(cfg)?;
    SenderStrategy::new([
        stealthy.mass[0] * (1.0 - omega),
        stealthy.mass[1] * (1.0 - omega),
        omega,
    ])
}

/// Range of `beta` over all message directions: the eigenvalue range of the
/// pencil `Q1 v = beta (Q0 + Q1) v`. Isotropic weights collapse it to a
/// point.
pub fn beta_range(weights: &ReceiverWeights) -> Result<(f64, f64)> {
    let sum = crate::mathkit::SymMatrix::new(
        weights.q0.as_matrix() + weights.q1.as_matrix(),
    )?;
    let es = crate::mathkit::sym_eigen(&sum);
    let inv_sqrt = &es.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&es.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * es.eigenvectors.transpose();
    let mid = crate::mathkit::SymMatrix::new(&inv_sqrt * weights.q1.as_matrix() * &inv_sqrt)?;
    let em = crate::mathkit::sym_eigen(&mid);
    Ok((em.min(), em.max()))
}

/// Realized sender utility: the benign sender pays its squared estimation
/// error regardless of the action; the malicious sender earns squared
/// deviation only when the message is accepted.
pub fn sender_step_utility(
    identity: Identity,
    m: &DVector<f64>,
    x_true: &DVector<f64>,
    action: ReceiverAction,
) -> f64 {
    let dev = (m - x_true).norm_squared();
    match identity {
        Identity::Benign => -dev,
        Identity::Malicious => {
            if action.accepted() {
                dev
            } else {
                0.0
            }
        }
    }
}

/// Realized receiver utility: rejecting a benign message costs the Q0-form,
/// accepting a malicious one costs the Q1-form.
pub fn receiver_step_utility(
    identity: Identity,
    m: &DVector<f64>,
    x_twin: &DVector<f64>,
    action: ReceiverAction,
    weights: &ReceiverWeights,
) -> f64 {
    let d = x_twin - m;
    match (identity, action) {
        (Identity::Benign, ReceiverAction::Reject) => {
            -(d.transpose() * weights.q0.as_matrix() * &d)[0]
        }
        (Identity::Malicious, ReceiverAction::Accept) => {
            -(d.transpose() * weights.q1.as_matrix() * &d)[0]
        }
        _ => 0.0,
    }
}

/// Per-tier outcome of the pooling fixed-point check.
#[derive(Debug, Clone)]
pub struct TierCheck {
    pub q: u8,
    pub mass_benign: f64,
    pub mass_malicious: f64,
    pub masses_match: bool,
    /// `f_b(pi*, q) - pi*` when the update is defined.
    pub fixed_point_residual: Option<f64>,
    /// Receiver action at `pi*` before and after the update (None when the
    /// update is undefined).
    pub action_stable: Option<bool>,
}

/// Classification labels from the equilibrium taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbneClass {
    Pooling,
    Separated,
    PartiallySeparated,
}

impl fmt::Display for PbneClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PbneClass::Pooling => write!(f, "pooling"),
            PbneClass::Separated => write!(f, "separated"),
            PbneClass::PartiallySeparated => write!(f, "partially separated"),
        }
    }
}

/// Report produced by [`verify_pooling_pbne`].
#[derive(Debug, Clone)]
pub struct PbneReport {
    pub pi_star: f64,
    pub beta: f64,
    pub tiers: Vec<TierCheck>,
    pub on_path_fixed_point: bool,
    pub classification: PbneClass,
    pub notes: Vec<String>,
}

impl fmt::Display for PbneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pooling equilibrium verification")?;
        writeln!(f, "  pi* = {:.6}, beta = {:.6}", self.pi_star, self.beta)?;
        writeln!(f, "  profile classification: {}", self.classification)?;
        for t in &self.tiers {
            write!(
                f,
                "  q={}: benign mass {:.6}, malicious mass {:.6}",
                t.q, t.mass_benign, t.mass_malicious
            )?;
            match t.fixed_point_residual {
                Some(r) => write!(f, ", |f_b(pi*) - pi*| = {:.3e}", r.abs())?,
                None => write!(f, ", belief update undefined")?,
            }
            match t.action_stable {
                Some(true) => writeln!(f, ", receiver action stable")?,
                Some(false) => writeln!(f, ", receiver action CHANGES")?,
                None => writeln!(f)?,
            }
        }
        writeln!(
            f,
            "  fixed point on the on-path evidence set {{0,1}}: {}",
            if self.on_path_fixed_point { "holds" } else { "FAILS" }
        )?;
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

/// Check the pooling-equilibrium consistency requirements: the belief is a
/// fixed point of the update wherever the two identities' masses agree, the
/// receiver's action at `pi*` is unchanged by on-path updates, and any tier
/// where the profiles differ is flagged rather than hidden.
pub fn verify_pooling_pbne(
    sigma_benign: &SenderStrategy,
    sigma_malicious: &SenderStrategy,
    pi_star: f64,
    beta: f64,
) -> Result<PbneReport> {
    let prior = Belief::new(pi_star)?;
    let mut tiers = Vec::new();
    let mut notes = Vec::new();
    let mut on_path_fixed_point = true;
    for q in [Tier::Qualified, Tier::Unqualified, Tier::Detrimental] {
        let sb = sigma_benign.prob(q);
        let sm = sigma_malicious.prob(q);
        let masses_match = (sb - sm).abs() <= 1e-12;
        let update = belief_update(prior, q, sigma_benign, sigma_malicious);
        let (fixed_point_residual, action_stable) = match update {
            Ok(post) => {
                let before = receiver_best_response(q, prior, beta);
                let after = receiver_best_response(q, post, beta);
                (Some(post.pi0 - pi_star), Some(before == after))
            }
            Err(_) => (None, None),
        };
        if q != Tier::Detrimental {
            if masses_match {
                if let Some(r) = fixed_point_residual {
                    if r.abs() > 1e-12 {
                        on_path_fixed_point = false;
                    }
                }
            } else {
                on_path_fixed_point = false;
                notes.push(format!(
                    "on-path tier q={} has unequal masses ({:.6} vs {:.6}); the exact fixed point holds only up to this gap",
                    q.as_u8(), sb, sm
                ));
            }
        } else if !masses_match {
            let post = fixed_point_residual.map(|r| pi_star + r);
            notes.push(format!(
                "tier q=2 separates the profiles ({:.6} vs {:.6}); literal Bayes maps pi* to {}; the run loop treats q=2 as the alarm path with a hostile off-path belief",
                sb,
                sm,
                post.map_or("undefined".to_string(), |p| format!("{p:.6}")),
            ));
        }
        tiers.push(TierCheck {
            q: q.as_u8(),
            mass_benign: sb,
            mass_malicious: sm,
            masses_match,
            fixed_point_residual,
            action_stable,
        });
    }
    let all_match = tiers.iter().all(|t| t.masses_match);
    let supports_disjoint = tiers
        .iter()
        .all(|t| t.mass_benign <= 1e-12 || t.mass_malicious <= 1e-12);
    let classification = if all_match {
        PbneClass::Pooling
    } else if supports_disjoint {
        PbneClass::Separated
    } else {
        PbneClass::PartiallySeparated
    };
    if classification == PbneClass::PartiallySeparated {
        notes.push(
            "profiles pool on the dominant evidence mass but are not identical; pooling holds up to the detrimental-tier leakage".into(),
        );
    }
    Ok(PbneReport {
        pi_star,
        beta,
        tiers,
        on_path_fixed_point,
        classification,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::estimation::{ResidualModel, ResidualSource};
    use crate::mathkit::{RngStream, SymMatrix};
    use proptest::prelude::*;

    fn cfg_dof(dof: u32, rho1: f64, rho2: f64) -> DetectorConfig {
        let residual = ResidualModel::from_covariance(
            SymMatrix::identity(dof as usize),
            ResidualSource::Analytic,
        )
        .unwrap();
        DetectorConfig::new(rho1, rho2, dof, residual).unwrap()
    }

    fn paper_cfg() -> DetectorConfig {
        cfg_dof(4, 9.487729036781154, 18.46682695290317)
    }

    #[test]
    fn beta_symmetric_weights_give_half() {
        let w = ReceiverWeights::new(SymMatrix::identity(2), SymMatrix::identity(2)).unwrap();
        let x = DVector::from_row_slice(&[1.0, -0.5]);
        let m = DVector::from_row_slice(&[0.0, 0.25]);
        assert!((beta_threshold(&x, &m, &w).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn beta_scalar_ratio() {
        let w = ReceiverWeights::new(
            SymMatrix::scaled_identity(2, 3.0),
            SymMatrix::identity(2),
        )
        .unwrap();
        let x = DVector::from_row_slice(&[1.0, 2.0]);
        let m = DVector::zeros(2);
        assert!((beta_threshold(&x, &m, &w).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn beta_direct_quadratic_form_oracle() {
        let eps = 1e-6;
        let q0 = SymMatrix::from_diagonal(&[1.0 + eps, 0.01 + eps]);
        let q1 = SymMatrix::from_diagonal(&[0.01 + eps, 1.0 + eps]);
        let w = ReceiverWeights::new(q0.clone(), q1.clone()).unwrap();
        let x = DVector::from_row_slice(&[1.0, 0.0]);
        let m = DVector::zeros(2);
        let d = &x - &m;
        let oracle = (d.transpose() * q1.as_matrix() * &d)[0]
            / (d.transpose() * (q0.as_matrix() + q1.as_matrix()) * &d)[0];
        assert!((beta_threshold(&x, &m, &w).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn beta_degenerate_message_errors() {
        let w = ReceiverWeights::new(SymMatrix::identity(2), SymMatrix::identity(2)).unwrap();
        let x = DVector::from_row_slice(&[1.0, 2.0]);
        assert!(beta_threshold(&x, &x, &w).is_err());
    }

    #[test]
    fn best_response_branches() {
        let beta = 0.65;
        assert_eq!(
            receiver_best_response(Tier::Detrimental, Belief::new(0.99).unwrap(), beta),
            ReceiverAction::Reject
        );
        assert_eq!(
            receiver_best_response(Tier::Unqualified, Belief::new(0.9).unwrap(), beta),
            ReceiverAction::Accept
        );
        assert_eq!(
            receiver_best_response(Tier::Qualified, Belief::new(0.64).unwrap(), beta),
            ReceiverAction::Reject
        );
        // boundary accepts
        assert_eq!(
            receiver_best_response(Tier::Qualified, Belief::new(beta).unwrap(), beta),
            ReceiverAction::Accept
        );
    }

    #[test]
    fn best_response_is_utility_argmax() {
        // brute-force two-point comparison of expected receiver utility
        let mut rng = RngStream::new(42);
        for _ in 0..500 {
            let q0 = {
                let d = [rng.uniform() + 0.1, rng.uniform() + 0.1];
                SymMatrix::from_diagonal(&d)
            };
            let q1 = {
                let d = [rng.uniform() + 0.1, rng.uniform() + 0.1];
                SymMatrix::from_diagonal(&d)
            };
            let w = ReceiverWeights::new(q0, q1).unwrap();
            let x = DVector::from_fn(2, |_, _| rng.standard_normal());
            let m = DVector::from_fn(2, |_, _| rng.standard_normal());
            let pi0 = rng.uniform();
            let beta = beta_threshold(&x, &m, &w).unwrap();
            let chosen = receiver_best_response(Tier::Qualified, Belief::new(pi0).unwrap(), beta);
            let expected_utility = |a: ReceiverAction| {
                pi0 * receiver_step_utility(Identity::Benign, &m, &x, a, &w)
                    + (1.0 - pi0) * receiver_step_utility(Identity::Malicious, &m, &x, a, &w)
            };
            let ua = expected_utility(ReceiverAction::Accept);
            let ur = expected_utility(ReceiverAction::Reject);
            let best = if ua >= ur {
                ReceiverAction::Accept
            } else {
                ReceiverAction::Reject
            };
            assert_eq!(chosen, best, "pi0={pi0}, beta={beta}, ua={ua}, ur={ur}");
        }
    }

    #[test]
    fn belief_update_cases() {
        let prior = Belief::new(0.8).unwrap();
        let same = SenderStrategy::new([0.95, 0.05, 0.0]).unwrap();
        let post = belief_update(prior, Tier::Qualified, &same, &same).unwrap();
        assert!((post.pi0 - 0.8).abs() < 1e-15);

        // exonerating evidence: malicious mass zero
        let sb = SenderStrategy::new([0.5, 0.3, 0.2]).unwrap();
        let sm = SenderStrategy::new([0.0, 0.5, 0.5]).unwrap();
        let post = belief_update(prior, Tier::Qualified, &sb, &sm).unwrap();
        assert_eq!(post.pi0, 1.0);

        // direct arithmetic oracle
        let sb = SenderStrategy::new([0.95, 0.05, 0.0]).unwrap();
        let sm = SenderStrategy::new([0.5, 0.5, 0.0]).unwrap();
        let post = belief_update(prior, Tier::Qualified, &sb, &sm).unwrap();
        let oracle = 0.95 * 0.8 / (0.95 * 0.8 + 0.5 * 0.2);
        assert!((post.pi0 - oracle).abs() < 1e-15);
        assert!((oracle - 0.8837).abs() < 1e-4);
    }

    #[test]
    fn belief_update_undefined_when_both_zero() {
        let sb = SenderStrategy::new([1.0, 0.0, 0.0]).unwrap();
        let sm = SenderStrategy::new([1.0, 0.0, 0.0]).unwrap();
        assert!(belief_update(Belief::new(0.5).unwrap(), Tier::Detrimental, &sb, &sm).is_err());
    }

    #[test]
    fn profiles_match_paper_masses() {
        let cfg = paper_cfg();
        let b = benign_strategy_profile(&cfg).unwrap();
        assert!((b.mass[0] - 0.95).abs() < 1e-3);
        assert!((b.mass[1] - 0.049).abs() < 1e-3);
        assert!((b.mass[2] - 0.001).abs() < 2e-4);
        let s = stealthy_strategy_profile(&cfg).unwrap();
        assert!((s.mass[0] - 0.95).abs() < 1e-3);
        assert!((s.mass[1] - 0.05).abs() < 1e-3);
        assert_eq!(s.mass[2], 0.0);
    }

    #[test]
    fn profiles_dof2_closed_form() {
        let cfg = cfg_dof(2, 2.0 * (2.0f64).ln(), 2.0 * (10.0f64).ln());
        let b = benign_strategy_profile(&cfg).unwrap();
        assert!((b.mass[0] - 0.5).abs() < 1e-9);
        assert!((b.mass[1] - 0.4).abs() < 1e-9);
        assert!((b.mass[2] - 0.1).abs() < 1e-9);
        let s = stealthy_strategy_profile(&cfg).unwrap();
        assert!((s.mass[0] - 0.5).abs() < 1e-9);
        assert!((s.mass[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn collapsing_band_empties_middle_tier() {
        let cfg = cfg_dof(4, 9.49, 9.49 + 1e-9);
        let b = benign_strategy_profile(&cfg).unwrap();
        assert!(b.mass[1] < 1e-9);
    }

    #[test]
    fn stealthy_profile_masses_sum_to_one() {
        for rho1 in [1.0, 5.0, 9.49] {
            let cfg = cfg_dof(4, rho1, rho1 + 9.0);
            let s = stealthy_strategy_profile(&cfg).unwrap();
            assert!((s.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indicator_structure_of_utilities() {
        let m = DVector::from_row_slice(&[1.0, 2.0]);
        let x = DVector::from_row_slice(&[0.0, 0.0]);
        let w = ReceiverWeights::new(SymMatrix::identity(2), SymMatrix::identity(2)).unwrap();
        assert_eq!(
            sender_step_utility(Identity::Malicious, &m, &x, ReceiverAction::Reject),
            0.0
        );
        assert!(sender_step_utility(Identity::Benign, &m, &x, ReceiverAction::Accept) <= 0.0);
        assert_eq!(
            receiver_step_utility(Identity::Benign, &m, &x, ReceiverAction::Accept, &w),
            0.0
        );
        assert_eq!(
            receiver_step_utility(Identity::Malicious, &m, &x, ReceiverAction::Reject, &w),
            0.0
        );
    }

    #[test]
    fn pooling_report_identical_profiles() {
        let s = SenderStrategy::new([0.95, 0.049, 0.001]).unwrap();
        let rep = verify_pooling_pbne(&s, &s, 0.8, 0.65).unwrap();
        assert_eq!(rep.classification, PbneClass::Pooling);
        assert!(rep.on_path_fixed_point);
        for t in &rep.tiers {
            assert!(t.fixed_point_residual.unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_report_flags_detrimental_leakage() {
        let cfg = paper_cfg();
        let b = benign_strategy_profile(&cfg).unwrap();
        let s = stealthy_strategy_profile(&cfg).unwrap();
        let rep = verify_pooling_pbne(&b, &s, 0.8, 0.65).unwrap();
        // q=0 masses agree exactly, so its residual vanishes
        assert!(rep.tiers[0].masses_match);
        assert!(rep.tiers[0].fixed_point_residual.unwrap().abs() < 1e-12);
        // q=1 and q=2 are flagged
        assert!(!rep.tiers[1].masses_match);
        assert!(!rep.tiers[2].masses_match);
        assert!(!rep.notes.is_empty());
        assert_eq!(rep.classification, PbneClass::PartiallySeparated);
        // boundary pi* = beta: acceptance on the >= branch survives an
        // equal-mass update
        let rep2 = verify_pooling_pbne(&s, &s, 0.65, 0.65).unwrap();
        assert!(rep2.tiers[0].action_stable.unwrap());
    }

    proptest! {
        #[test]
        fn belief_monotone_in_likelihood_ratio(
            pi0 in 0.01f64..0.99,
            sb in 0.05f64..0.95,
            sm1 in 0.05f64..0.95,
            sm2 in 0.05f64..0.95,
        ) {
            // larger sigma_b/sigma_m never decreases the posterior
            let (lo, hi) = if sm1 <= sm2 { (sm1, sm2) } else { (sm2, sm1) };
            let mk = |p: f64| SenderStrategy::new([p, 1.0 - p, 0.0]).unwrap();
            let prior = Belief::new(pi0).unwrap();
            let post_hi_ratio = belief_update(prior, Tier::Qualified, &mk(sb), &mk(lo)).unwrap();
            let post_lo_ratio = belief_update(prior, Tier::Qualified, &mk(sb), &mk(hi)).unwrap();
            prop_assert!(post_hi_ratio.pi0 >= post_lo_ratio.pi0 - 1e-12);
        }

        #[test]
        fn matched_masses_fix_every_belief(pi0 in 1e-6f64..0.999999, q0 in 0.1f64..0.9) {
            let s = SenderStrategy::new([q0, 1.0 - q0, 0.0]).unwrap();
            let prior = Belief::new(pi0).unwrap();
            for q in [Tier::Qualified, Tier::Unqualified] {
                let post = belief_update(prior, q, &s, &s).unwrap();
                prop_assert!((post.pi0 - pi0).abs() < 1e-12);
            }
        }
    }
}
