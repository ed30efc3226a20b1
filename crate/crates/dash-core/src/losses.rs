//! Training losses and their exact gradients.
//!
//! Four scalar losses drive the optimizer:
//! - `ce_label_smoothing`: smoothed cross-entropy on raw logits;
//! - `member_loss`: the same loss through one member, with a parameter
//!   gradient;
//! - `ensemble_loss`: smoothed cross-entropy of the averaged-softmax
//!   mixture, differentiated w.r.t. one member with the others held
//!   fixed;
//! - `diversity_loss`: pairwise KL between members' non-target softmax
//!   distributions (the ground-truth class logit is dropped before the
//!   softmax, so diversifying never competes with predicting the label);
//! - `combined_loss`: member + gamma * ensemble + gamma_c * diversity,
//!   assembled with a single backward pass.
//!
//! Every gradient here is checked against central finite differences in
//! the tests and again in the acceptance suite.

use crate::error::{Error, Result};
use crate::model::{Batch, Ensemble, MlpModel, ParamVector};
use crate::tensor::Tensor;

/// A scalar loss plus, when requested, its gradient w.r.t. one member's
/// parameters.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Option<ParamVector>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Parameter(format!(
            "label smoothing alpha must be in [0,1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    for (n, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index(format!(
                "label {y} at row {n} out of range for {classes} classes"
            )));
        }
    }
    Ok(())
}

/// Smoothed target weight on class `c` for true label `y`:
/// `(1-alpha) * [c==y] + alpha/M`.
#[inline]
fn smoothed_target(c: usize, y: usize, alpha: f64, classes: usize) -> f64 {
    let uniform = alpha / classes as f64;
    if c == y {
        1.0 - alpha + uniform
    } else {
        uniform
    }
}

/// Row-wise log-softmax (temperature 1) of one logit slice.
fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - max - log_sum;
    }
}

/// Mean over the batch of `-sum_c q_c log p_c` with
/// `q = (1-alpha) onehot(y) + alpha/M` and `p = softmax(logits, 1)`.
pub fn ce_label_smoothing(logits: &Tensor, labels: &[usize], alpha: f64) -> Result<f64> {
    Ok(ce_label_smoothing_with_grad(logits, labels, alpha)?.0)
}

/// Smoothed cross-entropy value plus its gradient w.r.t. the logits:
/// `(p - q) / b` per row.
pub fn ce_label_smoothing_with_grad(
    logits: &Tensor,
    labels: &[usize],
    alpha: f64,
) -> Result<(f64, Tensor)> {
    check_alpha(alpha)?;
    let (b, classes) = (logits.rows(), logits.cols());
    if b != labels.len() {
        return Err(Error::Dimension {
            context: "ce_label_smoothing",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    check_labels(labels, classes)?;
    let probs = logits.softmax_rows(1.0)?;
    let mut grad = Tensor::zeros(vec![b, classes]);
    let mut lp = vec![0.0; classes];
    let mut value = 0.0;
    let inv_b = 1.0 / b as f64;
    for n in 0..b {
        log_softmax_into(logits.row(n), &mut lp);
        for c in 0..classes {
            let q = smoothed_target(c, labels[n], alpha, classes);
            value -= q * lp[c] * inv_b;
            grad.set(n, c, (probs.at(n, c) - q) * inv_b);
        }
    }
    Ok((value, grad))
}

/// Vector-Jacobian product through a softmax row: given the softmax
/// output `p` and an upstream gradient `u` on the probabilities, the
/// gradient on the logits is `p_d (u_d - sum_c u_c p_c)`.
fn softmax_vjp(probs: &[f64], upstream: &[f64], out: &mut [f64]) {
    let dot: f64 = probs.iter().zip(upstream).map(|(p, u)| p * u).sum();
    for ((o, &p), &u) in out.iter_mut().zip(probs).zip(upstream) {
        *o = p * (u - dot);
    }
}

/// Plain smoothed cross-entropy of member `i`, gradient w.r.t. its
/// parameters.
pub fn member_loss(
    ens: &Ensemble,
    batch: &Batch,
    i: usize,
    alpha: f64,
    want_grad: bool,
) -> Result<LossValue> {
    let member = member_at(ens, i)?;
    let (logits, cache) = member.forward(&batch.inputs)?;
    let (value, grad_logits) = ce_label_smoothing_with_grad(&logits, &batch.labels, alpha)?;
    let grad = if want_grad {
        Some(member.backward(&cache, &grad_logits)?)
    } else {
        None
    };
    Ok(LossValue { value, grad })
}

fn member_at(ens: &Ensemble, i: usize) -> Result<&MlpModel> {
    ens.members().get(i).ok_or_else(|| {
        Error::Index(format!(
            "member index {i} out of range for ensemble of {}",
            ens.len()
        ))
    })
}

/// Smoothed cross-entropy of the averaged-softmax prediction,
/// differentiated w.r.t. member `i` with all other members held fixed.
pub fn ensemble_loss(
    ens: &Ensemble,
    batch: &Batch,
    i: usize,
    alpha: f64,
    want_grad: bool,
) -> Result<LossValue> {
    check_alpha(alpha)?;
    let member = member_at(ens, i)?;
    let classes = ens.output_dim();
    check_labels(&batch.labels, classes)?;
    let (logits_i, cache) = member.forward(&batch.inputs)?;
    let probs_i = logits_i.softmax_rows(1.0)?;
    let mut mixture = probs_i.clone();
    for (j, other) in ens.members().iter().enumerate() {
        if j != i {
            mixture = mixture.add(&other.logits(&batch.inputs)?.softmax_rows(1.0)?)?;
        }
    }
    let m = ens.len() as f64;
    let mixture = mixture.scale(1.0 / m);

    let b = batch.size();
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut upstream = Tensor::zeros(vec![b, classes]);
    let mut grad_on_probs = vec![0.0; classes];
    let mut row_out = vec![0.0; classes];
    for n in 0..b {
        for c in 0..classes {
            let q = smoothed_target(c, batch.labels[n], alpha, classes);
            let p_bar = mixture.at(n, c).max(f64::MIN_POSITIVE);
            value -= q * p_bar.ln() * inv_b;
            // d(value)/d(p_i) = (1/m) * d(value)/d(p_bar)
            grad_on_probs[c] = -q / p_bar * inv_b / m;
        }
        softmax_vjp(probs_i.row(n), &grad_on_probs, &mut row_out);
        for c in 0..classes {
            upstream.set(n, c, row_out[c]);
        }
    }
    let grad = if want_grad {
        Some(member.backward(&cache, &upstream)?)
    } else {
        None
    };
    Ok(LossValue { value, grad })
}

/// Non-target softmax distributions of every member at temperature
/// `tau`, per sample: the ground-truth logit is removed, the remaining
/// `M-1` logits are softmaxed. Returns per member a `[b, M-1]` matrix of
/// probabilities and one of log-probabilities.
fn non_target_distributions(
    member_logits: &[Tensor],
    labels: &[usize],
    tau: f64,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let b = labels.len();
    let classes = member_logits[0].cols();
    let reduced = classes - 1;
    let mut probs = Vec::with_capacity(member_logits.len());
    let mut log_probs = Vec::with_capacity(member_logits.len());
    let mut h = vec![0.0; reduced];
    let mut lp = vec![0.0; reduced];
    for logits in member_logits {
        let mut p_all = Tensor::zeros(vec![b, reduced]);
        let mut lp_all = Tensor::zeros(vec![b, reduced]);
        for n in 0..b {
            let y = labels[n];
            let row = logits.row(n);
            let mut t = 0;
            for (c, &z) in row.iter().enumerate() {
                if c != y {
                    h[t] = z / tau;
                    t += 1;
                }
            }
            log_softmax_into(&h, &mut lp);
            for c in 0..reduced {
                lp_all.set(n, c, lp[c]);
                p_all.set(n, c, lp[c].exp());
            }
        }
        probs.push(p_all);
        log_probs.push(lp_all);
    }
    (probs, log_probs)
}

/// Diversity loss of member `i` (Kullback-Leibler form): per sample, the
/// ground-truth class logit is dropped from every member's logits, the
/// remaining logits are softmaxed at temperature `tau`, and
/// `KL(member_i || member_j)` is summed over `j != i`; the total is
/// averaged over the batch. Gradient w.r.t. member `i` only; the other
/// members are treated as constants.
pub fn diversity_loss(
    ens: &Ensemble,
    batch: &Batch,
    i: usize,
    tau: f64,
    want_grad: bool,
) -> Result<LossValue> {
    let classes = ens.output_dim();
    if classes < 2 {
        return Err(Error::Unsupported(
            "diversity loss needs at least 2 classes (non-target vector would be empty)".into(),
        ));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "diversity temperature must be positive, got {tau}"
        )));
    }
    let member = member_at(ens, i)?;
    check_labels(&batch.labels, classes)?;

    let mut member_logits = Vec::with_capacity(ens.len());
    let mut cache_i = None;
    for (j, other) in ens.members().iter().enumerate() {
        if j == i {
            let (logits, cache) = other.forward(&batch.inputs)?;
            cache_i = Some(cache);
            member_logits.push(logits);
        } else {
            member_logits.push(other.logits(&batch.inputs)?);
        }
    }
    let (probs, log_probs) = non_target_distributions(&member_logits, &batch.labels, tau);

    let b = batch.size();
    let reduced = classes - 1;
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut upstream = Tensor::zeros(vec![b, classes]);
    for n in 0..b {
        let y = batch.labels[n];
        let p_i = probs[i].row(n);
        let lp_i = log_probs[i].row(n);
        // accumulated gradient on the reduced logits h_i = z_i / tau
        let mut acc = vec![0.0; reduced];
        for j in 0..ens.len() {
            if j == i {
                continue;
            }
            let lp_j = log_probs[j].row(n);
            let mut kl = 0.0;
            for c in 0..reduced {
                kl += p_i[c] * (lp_i[c] - lp_j[c]);
            }
            value += kl * inv_b;
            if want_grad {
                // dKL/dh_d = p_d ((lp_i,d - lp_j,d) - KL)
                for c in 0..reduced {
                    acc[c] += p_i[c] * ((lp_i[c] - lp_j[c]) - kl);
                }
            }
        }
        if want_grad {
            // chain through h = z / tau and scatter back around the
            // excluded target position
            let mut t = 0;
            for c in 0..classes {
                if c != y {
                    upstream.set(n, c, acc[t] / tau * inv_b);
                    t += 1;
                }
            }
        }
    }
    let grad = if want_grad {
        Some(member.backward(&cache_i.unwrap(), &upstream)?)
    } else {
        None
    };
    Ok(LossValue { value, grad })
}

/// Combined objective for member `i`:
/// `member CE + gamma * ensemble CE + gamma_c * diversity`.
///
/// With `gamma_c = 0` this is the coupled loss the perturbation and
/// descent steps use; with `gamma = gamma_c = 0` it reduces to the plain
/// smoothed cross-entropy of member `i`. Zero weights skip their term
/// entirely, so those reductions are bit-exact, and the gradient is
/// assembled with a single backward pass through member `i`.
pub fn combined_loss(
    ens: &Ensemble,
    batch: &Batch,
    i: usize,
    gamma: f64,
    gamma_c: f64,
    tau: f64,
    alpha: f64,
    want_grad: bool,
) -> Result<LossValue> {
    if gamma < 0.0 || gamma_c < 0.0 {
        return Err(Error::Parameter(format!(
            "loss weights must be nonnegative, got gamma={gamma} gamma_c={gamma_c}"
        )));
    }
    check_alpha(alpha)?;
    let member = member_at(ens, i)?;
    let classes = ens.output_dim();
    check_labels(&batch.labels, classes)?;

    let (logits_i, cache) = member.forward(&batch.inputs)?;
    let (ce_value, mut upstream) = ce_label_smoothing_with_grad(&logits_i, &batch.labels, alpha)?;
    let mut value = ce_value;

    let need_others = gamma != 0.0 || (gamma_c != 0.0 && classes >= 2);
    let mut member_logits: Vec<Tensor> = Vec::new();
    if need_others {
        for (j, other) in ens.members().iter().enumerate() {
            if j == i {
                member_logits.push(logits_i.clone());
            } else {
                member_logits.push(other.logits(&batch.inputs)?);
            }
        }
    }

    let b = batch.size();
    let inv_b = 1.0 / b as f64;
    let m = ens.len() as f64;

    if gamma != 0.0 {
        let probs_i = logits_i.softmax_rows(1.0)?;
        let mut mixture = Tensor::zeros(vec![b, classes]);
        for logits in &member_logits {
            mixture = mixture.add(&logits.softmax_rows(1.0)?)?;
        }
        let mixture = mixture.scale(1.0 / m);
        let mut grad_on_probs = vec![0.0; classes];
        let mut row_out = vec![0.0; classes];
        for n in 0..b {
            for c in 0..classes {
                let q = smoothed_target(c, batch.labels[n], alpha, classes);
                let p_bar = mixture.at(n, c).max(f64::MIN_POSITIVE);
                value += gamma * (-q * p_bar.ln() * inv_b);
                grad_on_probs[c] = -q / p_bar * inv_b / m;
            }
            softmax_vjp(probs_i.row(n), &grad_on_probs, &mut row_out);
            for c in 0..classes {
                upstream.set(n, c, upstream.at(n, c) + gamma * row_out[c]);
            }
        }
    }

    if gamma_c != 0.0 {
        if classes < 2 {
            return Err(Error::Unsupported(
                "diversity loss needs at least 2 classes (non-target vector would be empty)"
                    .into(),
            ));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "diversity temperature must be positive, got {tau}"
            )));
        }
        let (probs, log_probs) = non_target_distributions(&member_logits, &batch.labels, tau);
        let reduced = classes - 1;
        for n in 0..b {
            let y = batch.labels[n];
            let p_i = probs[i].row(n);
            let lp_i = log_probs[i].row(n);
            let mut acc = vec![0.0; reduced];
            for j in 0..ens.len() {
                if j == i {
                    continue;
                }
                let lp_j = log_probs[j].row(n);
                let mut kl = 0.0;
                for c in 0..reduced {
                    kl += p_i[c] * (lp_i[c] - lp_j[c]);
                }
                value += gamma_c * kl * inv_b;
                for c in 0..reduced {
                    acc[c] += p_i[c] * ((lp_i[c] - lp_j[c]) - kl);
                }
            }
            let mut t = 0;
            for c in 0..classes {
                if c != y {
                    upstream.set(n, c, upstream.at(n, c) + gamma_c * acc[t] / tau * inv_b);
                    t += 1;
                }
            }
        }
    }

    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "combined loss for member {i} is {value}"
        )));
    }
    let grad = if want_grad {
        Some(member.backward(&cache, &upstream)?)
    } else {
        None
    };
    Ok(LossValue { value, grad })
}

/// Gradient of the plain (unsmoothed when `alpha = 0`) ensemble
/// cross-entropy w.r.t. the input batch — the attack objective.
pub fn ensemble_ce_input_gradient(ens: &Ensemble, batch: &Batch, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    let classes = ens.output_dim();
    check_labels(&batch.labels, classes)?;
    let b = batch.size();
    let inv_b = 1.0 / b as f64;
    let m = ens.len() as f64;

    let mut forwards = Vec::with_capacity(ens.len());
    let mut mixture = Tensor::zeros(vec![b, classes]);
    for member in ens.members() {
        let (logits, cache) = member.forward(&batch.inputs)?;
        let probs = logits.softmax_rows(1.0)?;
        mixture = mixture.add(&probs)?;
        forwards.push((probs, cache));
    }
    let mixture = mixture.scale(1.0 / m);

    let mut grad_on_probs = Tensor::zeros(vec![b, classes]);
    for n in 0..b {
        for c in 0..classes {
            let q = smoothed_target(c, batch.labels[n], alpha, classes);
            let p_bar = mixture.at(n, c).max(f64::MIN_POSITIVE);
            grad_on_probs.set(n, c, -q / p_bar * inv_b / m);
        }
    }

    let mut total = Tensor::zeros(vec![b, ens.input_dim()]);
    let mut row_out = vec![0.0; classes];
    for (member, (probs, cache)) in ens.members().iter().zip(&forwards) {
        let mut upstream = Tensor::zeros(vec![b, classes]);
        for n in 0..b {
            softmax_vjp(probs.row(n), grad_on_probs.row(n), &mut row_out);
            for c in 0..classes {
                upstream.set(n, c, row_out[c]);
            }
        }
        total = total.add(&member.input_backward(cache, &upstream)?)?;
    }
    Ok(total)
}

/// Value of the plain ensemble cross-entropy (the attack objective).
pub fn ensemble_ce_value(ens: &Ensemble, batch: &Batch, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let classes = ens.output_dim();
    check_labels(&batch.labels, classes)?;
    let mixture = ens.predict(&batch.inputs)?;
    let inv_b = 1.0 / batch.size() as f64;
    let mut value = 0.0;
    for n in 0..batch.size() {
        for c in 0..classes {
            let q = smoothed_target(c, batch.labels[n], alpha, classes);
            if q != 0.0 {
                value -= q * mixture.at(n, c).max(f64::MIN_POSITIVE).ln() * inv_b;
            }
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::rng::Rng;

    fn random_batch(rng: &mut Rng, b: usize, d: usize, classes: usize) -> Batch {
        let inputs =
            Tensor::new(vec![b, d], (0..b * d).map(|_| rng.uniform(-1.5, 1.5)).collect()).unwrap();
        let labels = (0..b).map(|_| rng.next_below(classes)).collect();
        Batch::new(inputs, labels).unwrap()
    }

    fn random_ensemble(d: usize, classes: usize, m: usize, seed: u64) -> Ensemble {
        let sizes: Vec<Vec<usize>> = (0..m).map(|_| vec![d, 5, classes]).collect();
        Ensemble::init(&sizes, Activation::Tanh, seed).unwrap()
    }

    /// Central finite differences of a scalar loss over member `i`'s
    /// parameters.
    fn finite_difference_grad<F>(ens: &Ensemble, i: usize, loss: F) -> Vec<f64>
    where
        F: Fn(&Ensemble) -> f64,
    {
        let h = 1e-6;
        let base = ens.members()[i].flatten();
        let mut out = Vec::with_capacity(base.len());
        for p in 0..base.len() {
            let mut plus = ens.clone();
            let mut theta = base.clone();
            theta.as_mut_slice()[p] += h;
            plus.members_mut()[i].set_params(&theta).unwrap();
            let mut minus = ens.clone();
            theta.as_mut_slice()[p] -= 2.0 * h;
            minus.members_mut()[i].set_params(&theta).unwrap();
            out.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
        out
    }

    fn assert_grad_close(analytic: &ParamVector, fd: &[f64], tol: f64) {
        for (p, (&a, &f)) in analytic.as_slice().iter().zip(fd).enumerate() {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
            assert!(rel < tol, "param {p}: analytic={a} fd={f} rel={rel}");
        }
    }

    #[test]
    fn ce_zero_when_prediction_is_certain_and_correct() {
        // huge logit on the true class, alpha = 0
        let logits = Tensor::from_rows(&[vec![80.0, 0.0, 0.0]]).unwrap();
        let v = ce_label_smoothing(&logits, &[0], 0.0).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn ce_uniform_prediction_is_log_m_for_any_alpha() {
        let classes = 5;
        let logits = Tensor::zeros(vec![3, classes]);
        for alpha in [0.0, 0.1, 0.5, 0.9] {
            let v = ce_label_smoothing(&logits, &[0, 2, 4], alpha).unwrap();
            assert!((v - (classes as f64).ln()).abs() < 1e-12, "alpha={alpha}");
        }
    }

    #[test]
    fn ce_two_class_hand_value() {
        // p = [0.8, 0.2], y = 0, alpha = 0.1, M = 2
        // q = [0.95, 0.05]; loss = -(0.95 ln 0.8 + 0.05 ln 0.2)
        let z0 = (0.8f64 / 0.2).ln();
        let logits = Tensor::from_rows(&[vec![z0, 0.0]]).unwrap();
        let v = ce_label_smoothing(&logits, &[0], 0.1).unwrap();
        let expect = -(0.95 * 0.8f64.ln() + 0.05 * 0.2f64.ln());
        assert!((v - expect).abs() < 1e-12);
        assert!((expect - 0.29246).abs() < 1e-5);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(matches!(
            ce_label_smoothing(&logits, &[3], 0.1),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn ce_rejects_bad_alpha() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(ce_label_smoothing(&logits, &[0], 1.0).is_err());
        assert!(ce_label_smoothing(&logits, &[0], -0.1).is_err());
    }

    #[test]
    fn ce_bounded_below_by_smoothed_target_entropy() {
        // loss = H(q) + KL(q || p) >= H(q), equality iff p = q
        let mut rng = Rng::new(3);
        let classes = 4;
        let alpha = 0.2;
        let y = 1;
        let entropy_q: f64 = -(0..classes)
            .map(|c| {
                let q = smoothed_target(c, y, alpha, classes);
                q * q.ln()
            })
            .sum::<f64>();
        for _ in 0..200 {
            let row: Vec<f64> = (0..classes).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let logits = Tensor::new(vec![1, classes], row).unwrap();
            let v = ce_label_smoothing(&logits, &[y], alpha).unwrap();
            assert!(v >= entropy_q - 1e-12);
        }
        // equality at p = q: logits = ln q (up to a constant)
        let q_logits: Vec<f64> = (0..classes)
            .map(|c| smoothed_target(c, y, alpha, classes).ln())
            .collect();
        let logits = Tensor::new(vec![1, classes], q_logits).unwrap();
        let v = ce_label_smoothing(&logits, &[y], alpha).unwrap();
        assert!((v - entropy_q).abs() < 1e-12);
    }

    #[test]
    fn member_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let ens = random_ensemble(3, 4, 2, 11);
        let batch = random_batch(&mut rng, 4, 3, 4);
        let got = member_loss(&ens, &batch, 0, 0.1, true).unwrap();
        let fd = finite_difference_grad(&ens, 0, |e| {
            member_loss(e, &batch, 0, 0.1, false).unwrap().value
        });
        assert_grad_close(got.grad.as_ref().unwrap(), &fd, 1e-5);
    }

    #[test]
    fn ensemble_loss_identical_members_equals_member_loss() {
        let mut rng = Rng::new(7);
        let member =
            crate::model::MlpModel::init(vec![3, 4, 3], Activation::Tanh, &mut Rng::new(2))
                .unwrap();
        let ens = Ensemble::new(vec![member.clone(), member.clone()]).unwrap();
        let batch = random_batch(&mut rng, 5, 3, 3);
        let single = member_loss(&ens, &batch, 0, 0.1, false).unwrap().value;
        let mixed = ensemble_loss(&ens, &batch, 0, 0.1, false).unwrap().value;
        assert!((single - mixed).abs() < 1e-12);
    }

    #[test]
    fn ensemble_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let ens = random_ensemble(3, 4, 3, 23);
        let batch = random_batch(&mut rng, 4, 3, 4);
        for i in 0..3 {
            let got = ensemble_loss(&ens, &batch, i, 0.1, true).unwrap();
            let fd = finite_difference_grad(&ens, i, |e| {
                ensemble_loss(e, &batch, i, 0.1, false).unwrap().value
            });
            assert_grad_close(got.grad.as_ref().unwrap(), &fd, 1e-5);
        }
    }

    #[test]
    fn ensemble_loss_uniform_partner_mixture_oracle() {
        // member 1 outputs all-zero logits -> uniform probabilities; the
        // mixture is (p_0 + u)/2 and the loss is recomputed directly.
        let m0 = crate::model::MlpModel::init(vec![2, 3, 3], Activation::Tanh, &mut Rng::new(4))
            .unwrap();
        let m1 = crate::model::MlpModel::zeros(vec![2, 3], Activation::Tanh).unwrap();
        let ens = Ensemble::new(vec![m0.clone(), m1]).unwrap();
        let mut rng = Rng::new(14);
        let batch = random_batch(&mut rng, 6, 2, 3);
        let got = ensemble_loss(&ens, &batch, 0, 0.1, false).unwrap().value;

        let probs = m0
            .logits(&batch.inputs)
            .unwrap()
            .softmax_rows(1.0)
            .unwrap();
        let mut expect = 0.0;
        for n in 0..6 {
            for c in 0..3 {
                let q = smoothed_target(c, batch.labels[n], 0.1, 3);
                let p = (probs.at(n, c) + 1.0 / 3.0) / 2.0;
                expect -= q * p.ln() / 6.0;
            }
        }
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn diversity_zero_for_identical_members() {
        let member =
            crate::model::MlpModel::init(vec![2, 4, 3], Activation::Tanh, &mut Rng::new(3))
                .unwrap();
        let ens = Ensemble::new(vec![member.clone(), member.clone(), member]).unwrap();
        let mut rng = Rng::new(20);
        let batch = random_batch(&mut rng, 5, 2, 3);
        let v = diversity_loss(&ens, &batch, 1, 0.5, false).unwrap().value;
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn diversity_scalar_kl_value() {
        // M = 3, target class 2; non-target logits [1,0] vs [0,1], tau = 1:
        // KL = (e-1)/(e+1).
        let mut m0 = crate::model::MlpModel::zeros(vec![1, 3], Activation::Relu).unwrap();
        let mut p0 = m0.flatten();
        // bias layout for linear 1->3: weights (3) then biases (3)
        p0.as_mut_slice()[3] = 1.0; // class-0 bias
        m0.set_params(&p0).unwrap();
        let mut m1 = crate::model::MlpModel::zeros(vec![1, 3], Activation::Relu).unwrap();
        let mut p1 = m1.flatten();
        p1.as_mut_slice()[4] = 1.0; // class-1 bias
        m1.set_params(&p1).unwrap();
        let ens = Ensemble::new(vec![m0, m1]).unwrap();
        let batch = Batch::new(Tensor::zeros(vec![1, 1]), vec![2]).unwrap();
        let v = diversity_loss(&ens, &batch, 0, 1.0, false).unwrap().value;
        let e = std::f64::consts::E;
        assert!((v - (e - 1.0) / (e + 1.0)).abs() < 1e-12);
        assert!((v - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn diversity_ignores_target_logit_magnitude() {
        let ens = random_ensemble(2, 3, 2, 31);
        let mut rng = Rng::new(21);
        let batch = random_batch(&mut rng, 4, 2, 3);
        let base = diversity_loss(&ens, &batch, 0, 0.5, false).unwrap().value;
        // add a large constant to the target-class bias of member 1
        let mut bumped = ens.clone();
        let mut params = bumped.members()[1].flatten();
        let k = params.len();
        // last-layer biases are the final M entries of the flat vector
        let y0 = batch.labels[0];
        // craft a batch with a single shared label so one bias bump is target-only
        let uniform_batch = Batch::new(batch.inputs.clone(), vec![y0; 4]).unwrap();
        let base_u = diversity_loss(&ens, &uniform_batch, 0, 0.5, false)
            .unwrap()
            .value;
        params.as_mut_slice()[k - 3 + y0] += 7.5;
        bumped.members_mut()[1].set_params(&params).unwrap();
        let bumped_v = diversity_loss(&bumped, &uniform_batch, 0, 0.5, false)
            .unwrap()
            .value;
        assert!((base_u - bumped_v).abs() < 1e-12);
        let _ = base;
    }

    #[test]
    fn diversity_nonnegative_on_random_instances() {
        let mut rng = Rng::new(33);
        for seed in 0..30 {
            let ens = random_ensemble(3, 4, 3, seed);
            let batch = random_batch(&mut rng, 5, 3, 4);
            for i in 0..3 {
                let v = diversity_loss(&ens, &batch, i, 0.5, false).unwrap().value;
                assert!(v >= -1e-15, "seed {seed} member {i}: {v}");
            }
        }
    }

    #[test]
    fn diversity_rejects_single_class() {
        let sizes = vec![vec![2, 3, 1], vec![2, 3, 1]];
        let ens = Ensemble::init(&sizes, Activation::Tanh, 0).unwrap();
        let batch = Batch::new(Tensor::zeros(vec![1, 2]), vec![0]).unwrap();
        assert!(matches!(
            diversity_loss(&ens, &batch, 0, 0.5, false),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn diversity_gradient_matches_finite_differences() {
        let mut rng = Rng::new(40);
        let ens = random_ensemble(3, 4, 3, 41);
        let batch = random_batch(&mut rng, 4, 3, 4);
        for i in 0..3 {
            let got = diversity_loss(&ens, &batch, i, 0.5, true).unwrap();
            let fd = finite_difference_grad(&ens, i, |e| {
                diversity_loss(e, &batch, i, 0.5, false).unwrap().value
            });
            assert_grad_close(got.grad.as_ref().unwrap(), &fd, 1e-5);
        }
    }

    #[test]
    fn combined_reduces_to_parts() {
        let mut rng = Rng::new(50);
        let ens = random_ensemble(3, 4, 2, 51);
        let batch = random_batch(&mut rng, 4, 3, 4);
        // gamma_c = 0 -> coupled loss = member + gamma * ensemble
        let coupled = combined_loss(&ens, &batch, 0, 0.3, 0.0, 0.5, 0.1, false)
            .unwrap()
            .value;
        let member = member_loss(&ens, &batch, 0, 0.1, false).unwrap().value;
        let mixture = ensemble_loss(&ens, &batch, 0, 0.1, false).unwrap().value;
        assert!((coupled - (member + 0.3 * mixture)).abs() < 1e-12);
        // gamma = gamma_c = 0 -> plain member CE
        let plain = combined_loss(&ens, &batch, 0, 0.0, 0.0, 0.5, 0.1, false)
            .unwrap()
            .value;
        assert_eq!(plain, member);
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut rng = Rng::new(60);
        let ens = random_ensemble(3, 4, 3, 61);
        let batch = random_batch(&mut rng, 4, 3, 4);
        let (gamma, gamma_c) = (0.1, 0.5);
        for i in 0..3 {
            let got = combined_loss(&ens, &batch, i, gamma, gamma_c, 0.5, 0.1, true).unwrap();
            let fd = finite_difference_grad(&ens, i, |e| {
                combined_loss(e, &batch, i, gamma, gamma_c, 0.5, 0.1, false)
                    .unwrap()
                    .value
            });
            assert_grad_close(got.grad.as_ref().unwrap(), &fd, 1e-5);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let ens = random_ensemble(3, 4, 2, 70);
        let mut rng = Rng::new(71);
        let batch = random_batch(&mut rng, 3, 3, 4);
        let analytic = ensemble_ce_input_gradient(&ens, &batch, 0.0).unwrap();
        let h = 1e-6;
        for p in 0..batch.inputs.len() {
            let mut bp = batch.clone();
            bp.inputs.data_mut()[p] += h;
            let mut bm = batch.clone();
            bm.inputs.data_mut()[p] -= h;
            let fd = (ensemble_ce_value(&ens, &bp, 0.0).unwrap()
                - ensemble_ce_value(&ens, &bm, 0.0).unwrap())
                / (2.0 * h);
            let a = analytic.data()[p];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "input {p}: analytic={a} fd={fd}");
        }
    }

    #[test]
    fn linear_softmax_input_gradient_closed_form() {
        // Single linear member pair: grad_x = (1/m) sum_j (p_j - q) W_j^T / b
        // evaluated via the mixture formula; for identical members this is
        // (p - q) W^T / b.
        let member =
            crate::model::MlpModel::init(vec![3, 4], Activation::Relu, &mut Rng::new(80)).unwrap();
        let ens = Ensemble::new(vec![member.clone(), member.clone()]).unwrap();
        let mut rng = Rng::new(81);
        let batch = random_batch(&mut rng, 2, 3, 4);
        let got = ensemble_ce_input_gradient(&ens, &batch, 0.0).unwrap();

        let logits = member.logits(&batch.inputs).unwrap();
        let probs = logits.softmax_rows(1.0).unwrap();
        let mut pq = Tensor::zeros(vec![2, 4]);
        for n in 0..2 {
            for c in 0..4 {
                let q = if c == batch.labels[n] { 1.0 } else { 0.0 };
                pq.set(n, c, (probs.at(n, c) - q) / 2.0);
            }
        }
        let flat = member.flatten();
        let w = Tensor::new(vec![3, 4], flat.as_slice()[0..12].to_vec()).unwrap();
        let oracle = pq.matmul(&w.transpose()).unwrap();
        for (a, b) in got.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
