//! Numeric evaluator of the ensemble PAC-Bayes sharpness bound.
//!
//! The bound combines measured worst-case (sharp) empirical losses with
//! a complexity term:
//!
//! ```text
//! total = gamma * sharp_ensemble_loss
//!       + (1 - gamma)/m * sum_i sharp_member_losses[i]
//!       + (C L / sqrt(N)) * [ m sqrt(log(m (N + k) / delta))
//!           + sum_i sqrt(k log(1 + (|theta_i|^2/rho^2) (1 + sqrt(log N)/k)^2))
//!           + sqrt(k m log(1 + (sum_i |theta_i|^2/(m rho^2)) (1 + sqrt(log N/(m k)))^2))
//!           + O1 ]
//! ```
//!
//! This is descriptive tooling: the universal constant `C` and the
//! additive `O1` are explicit user-visible inputs (no absolute scale is
//! pretended), and the sharp losses are measured by finite search or
//! supplied by the caller — the inequality is not certified for the
//! finite search used.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{ensemble_ce_value, member_loss};
use crate::model::{Batch, Ensemble, ParamVector};
use crate::rng::Rng;

/// Everything the bound needs. `sharp_*` losses are max-perturbed
/// empirical losses, measured or user-supplied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Member count.
    pub m: usize,
    /// Per-member parameter count.
    pub k: usize,
    /// Sample count.
    pub n: usize,
    /// Perturbation radius.
    pub rho: f64,
    /// Confidence parameter in (0, 1).
    pub delta: f64,
    /// Trade-off between ensemble and member sharp terms, in [0, 1].
    pub gamma: f64,
    /// Upper bound on the loss.
    pub l: f64,
    /// Euclidean norms of each member's parameters.
    pub member_norms: Vec<f64>,
    /// Max-perturbed empirical loss per member.
    pub sharp_member_losses: Vec<f64>,
    /// Max-perturbed empirical loss of the whole ensemble.
    pub sharp_ensemble_loss: f64,
    /// Universal-constant stand-in.
    pub c: f64,
    /// Additive constant stand-in.
    pub o1: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        BoundInputs {
            m: 1,
            k: 1,
            n: 1,
            rho: 0.05,
            delta: 0.05,
            gamma: 0.1,
            l: 1.0,
            member_norms: vec![0.0],
            sharp_member_losses: vec![0.0],
            sharp_ensemble_loss: 0.0,
            c: 4.0,
            o1: 0.0,
        }
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.m == 0 {
            problems.push("m must be at least 1".to_string());
        }
        if self.k == 0 {
            problems.push("k must be at least 1".to_string());
        }
        if self.n == 0 {
            problems.push("N must be at least 1".to_string());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            problems.push(format!("delta must be in (0,1), got {}", self.delta));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            problems.push(format!("gamma must be in [0,1], got {}", self.gamma));
        }
        if self.rho <= 0.0 || !self.rho.is_finite() {
            problems.push(format!("rho must be positive, got {}", self.rho));
        }
        if self.l < 0.0 || !self.l.is_finite() {
            problems.push(format!("L must be nonnegative, got {}", self.l));
        }
        if self.member_norms.len() != self.m {
            problems.push(format!(
                "{} member norms for m = {}",
                self.member_norms.len(),
                self.m
            ));
        }
        if self.sharp_member_losses.len() != self.m {
            problems.push(format!(
                "{} sharp member losses for m = {}",
                self.sharp_member_losses.len(),
                self.m
            ));
        }
        if self.member_norms.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            problems.push("member norms must be nonnegative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }
}

/// The bound's terms, reported separately, plus their composition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundBreakdown {
    /// `gamma * sharp_ensemble_loss`.
    pub sharp_term_ensemble: f64,
    /// `(1 - gamma)/m * sum_i sharp_member_losses[i]`.
    pub sharp_term_members: f64,
    /// `m sqrt(log(m (N + k) / delta))`.
    pub complexity_log_term: f64,
    /// `sqrt(k log(1 + (|theta_i|^2/rho^2)(1 + sqrt(log N)/k)^2))` per member.
    pub member_kl_terms: Vec<f64>,
    /// `sqrt(k m log(1 + (sum |theta_i|^2/(m rho^2))(1 + sqrt(log N/(m k)))^2))`.
    pub ensemble_kl_term: f64,
    /// `C L / sqrt(N)` prefactor applied to the complexity sum.
    pub complexity_prefactor: f64,
    pub total: f64,
}

impl BoundBreakdown {
    /// Two-column term/value CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("term,value\n");
        out.push_str(&format!("sharp_term_ensemble,{}\n", self.sharp_term_ensemble));
        out.push_str(&format!("sharp_term_members,{}\n", self.sharp_term_members));
        out.push_str(&format!("complexity_log_term,{}\n", self.complexity_log_term));
        for (i, t) in self.member_kl_terms.iter().enumerate() {
            out.push_str(&format!("member_kl_term_{i},{t}\n"));
        }
        out.push_str(&format!("ensemble_kl_term,{}\n", self.ensemble_kl_term));
        out.push_str(&format!("complexity_prefactor,{}\n", self.complexity_prefactor));
        out.push_str(&format!("total,{}\n", self.total));
        out
    }
}

/// Evaluate all terms of the bound. Uses `ln_1p` for the `log(1 + x)`
/// forms so small norms do not lose precision.
pub fn evaluate_bound(inputs: &BoundInputs) -> Result<BoundBreakdown> {
    inputs.validate()?;
    let m = inputs.m as f64;
    let k = inputs.k as f64;
    let n = inputs.n as f64;
    let log_n = n.ln();

    let sharp_term_ensemble = inputs.gamma * inputs.sharp_ensemble_loss;
    let sharp_term_members =
        (1.0 - inputs.gamma) / m * inputs.sharp_member_losses.iter().sum::<f64>();

    let complexity_log_term = m * (m * (n + k) / inputs.delta).ln().sqrt();

    let member_factor = (1.0 + log_n.sqrt() / k).powi(2);
    let member_kl_terms: Vec<f64> = inputs
        .member_norms
        .iter()
        .map(|&norm| (k * ((norm * norm / (inputs.rho * inputs.rho)) * member_factor).ln_1p()).sqrt())
        .collect();

    let norm_sq_sum: f64 = inputs.member_norms.iter().map(|&x| x * x).sum();
    let ensemble_factor = (1.0 + (log_n / (m * k)).sqrt()).powi(2);
    let ensemble_kl_term = (k
        * m
        * ((norm_sq_sum / (m * inputs.rho * inputs.rho)) * ensemble_factor).ln_1p())
    .sqrt();

    let complexity_prefactor = inputs.c * inputs.l / n.sqrt();
    let complexity_sum = complexity_log_term
        + member_kl_terms.iter().sum::<f64>()
        + ensemble_kl_term
        + inputs.o1;
    let total = sharp_term_ensemble + sharp_term_members + complexity_prefactor * complexity_sum;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("bound total is {total}")));
    }
    Ok(BoundBreakdown {
        sharp_term_ensemble,
        sharp_term_members,
        complexity_log_term,
        member_kl_terms,
        ensemble_kl_term,
        complexity_prefactor,
        total,
    })
}

/// Sharp losses measured by random search, plus the norms the bound
/// needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharpMeasurement {
    pub member_norms: Vec<f64>,
    pub member_losses: Vec<f64>,
    pub sharp_member_losses: Vec<f64>,
    pub ensemble_loss: f64,
    pub sharp_ensemble_loss: f64,
}

/// Measure max-perturbed empirical losses by random search: per member,
/// the max of the smoothed CE over `samples` perturbations of that
/// member inside the `rho` ball; for the ensemble, over joint
/// perturbations of all members inside the `sqrt(m) rho` ball.
/// Directions are uniform on the sphere; radii uniform on `[0, R]`. The
/// zero perturbation is always included, so a measured sharp loss is
/// never below the unperturbed one. This is a finite search: it
/// certifies nothing about the true maximum.
pub fn measure_sharp_losses(
    ens: &Ensemble,
    data: &Dataset,
    rho: f64,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<SharpMeasurement> {
    if rho <= 0.0 || !rho.is_finite() {
        return Err(Error::Parameter(format!("rho must be positive, got {rho}")));
    }
    if data.is_empty() {
        return Err(Error::State("cannot measure sharp losses on an empty dataset".into()));
    }
    let batch = Batch::new(data.inputs.clone(), data.labels.clone())?;
    let mut rng = Rng::new(seed);
    let m = ens.len();

    let member_norms: Vec<f64> = ens.members().iter().map(|mm| mm.flatten().norm()).collect();
    let member_losses: Vec<f64> = (0..m)
        .map(|i| Ok(member_loss(ens, &batch, i, alpha, false)?.value))
        .collect::<Result<_>>()?;
    let ensemble_loss = ensemble_ce_value(ens, &batch, alpha)?;

    let random_delta = |rng: &mut Rng, k: usize, radius: f64| -> ParamVector {
        let mut d = ParamVector::from_vec((0..k).map(|_| rng.normal()).collect());
        let norm = d.norm();
        if norm > 0.0 {
            let r = radius * rng.next_f64();
            d.scale(r / norm);
        }
        d
    };

    let mut sharp_member_losses = member_losses.clone();
    for i in 0..m {
        let theta = ens.members()[i].flatten();
        let k = theta.len();
        let mut scratch = ens.clone();
        for _ in 0..samples {
            let mut perturbed = theta.clone();
            perturbed.axpy(1.0, &random_delta(&mut rng, k, rho));
            scratch.members_mut()[i].set_params(&perturbed)?;
            let v = member_loss(&scratch, &batch, i, alpha, false)?.value;
            if v > sharp_member_losses[i] {
                sharp_member_losses[i] = v;
            }
        }
    }

    let mut sharp_ensemble_loss = ensemble_loss;
    let total_k: usize = ens.members().iter().map(|mm| mm.param_count()).sum();
    let joint_radius = (m as f64).sqrt() * rho;
    for _ in 0..samples {
        let delta = random_delta(&mut rng, total_k, joint_radius);
        let mut scratch = ens.clone();
        let mut off = 0;
        for i in 0..m {
            let mut theta = scratch.members()[i].flatten();
            let k = theta.len();
            for (x, &d) in theta
                .as_mut_slice()
                .iter_mut()
                .zip(&delta.as_slice()[off..off + k])
            {
                *x += d;
            }
            off += k;
            scratch.members_mut()[i].set_params(&theta)?;
        }
        let v = ensemble_ce_value(&scratch, &batch, alpha)?;
        if v > sharp_ensemble_loss {
            sharp_ensemble_loss = v;
        }
    }

    Ok(SharpMeasurement {
        member_norms,
        member_losses,
        sharp_member_losses,
        ensemble_loss,
        sharp_ensemble_loss,
    })
}

/// Gaussian-smoothing scale behind the bound's radius:
/// `sigma = rho / (sqrt(k) + sqrt(log N))`. Needs `N >= 2` so the log is
/// positive.
pub fn sigma_from_rho(rho: f64, k: usize, n: usize) -> Result<f64> {
    if rho <= 0.0 || !rho.is_finite() {
        return Err(Error::Parameter(format!("rho must be positive, got {rho}")));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if n < 2 {
        return Err(Error::Parameter(format!(
            "N must be at least 2 (log N must be positive), got {n}"
        )));
    }
    Ok(rho / ((k as f64).sqrt() + (n as f64).ln().sqrt()))
}

/// KL divergence between the Gaussians `Q = N(theta, sigma_q^2 I_k)` and
/// `P = N(0, sigma_p^2 I_k)` with `mean_norm = |theta|`:
/// `0.5 [ (k sigma_q^2 + |theta|^2)/sigma_p^2 - k + k log(sigma_p^2/sigma_q^2) ]`.
pub fn gaussian_kl(sigma_q: f64, sigma_p: f64, mean_norm: f64, k: usize) -> Result<f64> {
    if sigma_q <= 0.0 || sigma_p <= 0.0 || !sigma_q.is_finite() || !sigma_p.is_finite() {
        return Err(Error::Parameter(format!(
            "variances must be positive, got sigma_q={sigma_q} sigma_p={sigma_p}"
        )));
    }
    if mean_norm < 0.0 {
        return Err(Error::Parameter(format!(
            "mean norm must be nonnegative, got {mean_norm}"
        )));
    }
    let kf = k as f64;
    let sq = sigma_q * sigma_q;
    let sp = sigma_p * sigma_p;
    Ok(0.5 * ((kf * sq + mean_norm * mean_norm) / sp - kf + kf * (sp / sq).ln()))
}
