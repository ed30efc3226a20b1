//! Evaluation metrics: accuracy, proper scoring rules, calibration, and
//! the two ensemble-diversity scores.
//!
//! Calibrated (`cal_*`) variants are recomputed after temperature
//! scaling, where the temperature minimizes validation NLL. Because the
//! ensemble has no single logit vector, the temperature is applied to
//! each member's logits before softmax-averaging (`CalLevel::Member`,
//! the default); `CalLevel::Mixture` instead power-scales the averaged
//! probabilities.
//!
//! Pinned definitions the paper-facing names leave open:
//! - ECE uses equal-width bins on the max-probability confidence over
//!   `[0, 1]`; a confidence of exactly 1 lands in the last bin.
//! - Cal-AAC is the area under the error-rate-versus-rejection curve:
//!   samples are sorted by descending confidence (ties by index), the
//!   error rate `err(j)` among the `n - j` most confident samples is
//!   evaluated on the grid `j = 0..n-1`, and the area is the trapezoidal
//!   average `sum_j (err(j) + err(j+1)) / 2 / (n-1)`. Lower is better.
//! - Log-determinant diversity (LD) L2-normalizes each member's
//!   non-target probability vector per sample, forms the member-by-member
//!   Gram matrix, and averages `log det(G + 1e-12 I)` over samples.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Ensemble;
use crate::tensor::Tensor;

/// Probability floor inside logs.
const NLL_FLOOR: f64 = 1e-12;
/// Gram-matrix jitter for the log-determinant.
const EPSILON_D: f64 = 1e-12;
/// Temperature search range and tolerance (on log T).
const LOG_T_LO: f64 = -2.995732273553991; // ln 0.05
const LOG_T_HI: f64 = 2.995732273553991; // ln 20
const LOG_T_TOL: f64 = 1e-4;

/// Index of the row maximum; first index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn check_eval_inputs(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.shape().len() != 2 || probs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension {
            context: "metrics",
            left: probs.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let classes = probs.cols();
    for (n, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index(format!(
                "label {y} at row {n} out of range for {classes} classes"
            )));
        }
    }
    Ok(())
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_eval_inputs(probs, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(n, &y)| argmax(probs.row(n)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean of `-log p_y` with probabilities floored at 1e-12.
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_eval_inputs(probs, labels)?;
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| -probs.at(n, y).max(NLL_FLOOR).ln())
        .sum();
    Ok(sum / labels.len() as f64)
}

/// Mean over samples of the squared distance between the probability row
/// and the one-hot label.
pub fn brier(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_eval_inputs(probs, labels)?;
    let classes = probs.cols();
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        for c in 0..classes {
            let target = if c == y { 1.0 } else { 0.0 };
            let d = probs.at(n, c) - target;
            total += d * d;
        }
    }
    Ok(total / labels.len() as f64)
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(probs: &Tensor, labels: &[usize], n_bins: usize) -> Result<f64> {
    check_eval_inputs(probs, labels)?;
    if n_bins == 0 {
        return Err(Error::Parameter("ece needs at least one bin".into()));
    }
    let n = labels.len();
    let mut bin_count = vec![0usize; n_bins];
    let mut bin_conf = vec![0.0; n_bins];
    let mut bin_acc = vec![0.0; n_bins];
    for (s, &y) in labels.iter().enumerate() {
        let row = probs.row(s);
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        bin_count[b] += 1;
        bin_conf[b] += conf;
        bin_acc[b] += if pred == y { 1.0 } else { 0.0 };
    }
    let mut total = 0.0;
    for b in 0..n_bins {
        if bin_count[b] == 0 {
            continue;
        }
        let w = bin_count[b] as f64 / n as f64;
        let conf = bin_conf[b] / bin_count[b] as f64;
        let acc = bin_acc[b] / bin_count[b] as f64;
        total += w * (acc - conf).abs();
    }
    Ok(total)
}

/// Per-bin table behind `ece`, for reliability-style CSV output:
/// `(bin_lo, bin_hi, count, mean_confidence, accuracy)`.
pub fn ece_bin_table(
    probs: &Tensor,
    labels: &[usize],
    n_bins: usize,
) -> Result<Vec<(f64, f64, usize, f64, f64)>> {
    check_eval_inputs(probs, labels)?;
    if n_bins == 0 {
        return Err(Error::Parameter("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut acc = vec![0.0; n_bins];
    for (s, &y) in labels.iter().enumerate() {
        let row = probs.row(s);
        let pred = argmax(row);
        let c = row[pred];
        let b = ((c * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += c;
        acc[b] += if pred == y { 1.0 } else { 0.0 };
    }
    Ok((0..n_bins)
        .map(|b| {
            let w = count[b].max(1) as f64;
            (
                b as f64 / n_bins as f64,
                (b + 1) as f64 / n_bins as f64,
                count[b],
                conf[b] / w,
                acc[b] / w,
            )
        })
        .collect())
}

/// Area under the error-versus-rejection curve (see module docs); lower
/// is better. Expects post-calibration probabilities.
pub fn cal_aac(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_eval_inputs(probs, labels)?;
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    // descending confidence, ties broken by original index
    order.sort_by(|&a, &b| {
        let ca = probs.row(a)[argmax(probs.row(a))];
        let cb = probs.row(b)[argmax(probs.row(b))];
        cb.partial_cmp(&ca).unwrap().then(a.cmp(&b))
    });
    // prefix error counts in confidence order
    let mut wrong_prefix = vec![0usize; n + 1];
    for (rank, &s) in order.iter().enumerate() {
        let wrong = argmax(probs.row(s)) != labels[s];
        wrong_prefix[rank + 1] = wrong_prefix[rank] + usize::from(wrong);
    }
    let err_at = |j: usize| -> f64 {
        let kept = n - j;
        wrong_prefix[kept] as f64 / kept as f64
    };
    if n == 1 {
        return Ok(err_at(0));
    }
    let mut area = 0.0;
    for j in 0..n - 1 {
        area += (err_at(j) + err_at(j + 1)) / 2.0;
    }
    Ok(area / (n - 1) as f64)
}

/// Mean over unordered member pairs of the fraction of samples where
/// argmax predictions differ.
pub fn disagreement(member_predictions: &[Vec<usize>]) -> Result<f64> {
    let m = member_predictions.len();
    if m < 2 {
        return Err(Error::State(format!(
            "disagreement needs at least 2 members, got {m}"
        )));
    }
    let n = member_predictions[0].len();
    if n == 0 || member_predictions.iter().any(|p| p.len() != n) {
        return Err(Error::Dimension {
            context: "disagreement",
            left: member_predictions.iter().map(|p| p.len()).collect(),
            right: vec![n],
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            let differ = member_predictions[i]
                .iter()
                .zip(&member_predictions[j])
                .filter(|(a, b)| a != b)
                .count();
            total += differ as f64 / n as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// In-place Cholesky log-determinant of a symmetric positive definite
/// matrix; pivots are floored at a tiny positive value so the jittered
/// Gram matrices used here always produce a finite result.
fn logdet_spd(g: &mut [Vec<f64>]) -> f64 {
    let m = g.len();
    let mut logdet = 0.0;
    for i in 0..m {
        for j in 0..=i {
            let mut sum = g[i][j];
            for t in 0..j {
                sum -= g[i][t] * g[j][t];
            }
            if i == j {
                let pivot = sum.max(1e-300);
                g[i][i] = pivot.sqrt();
                logdet += pivot.ln();
            } else {
                g[i][j] = sum / g[j][j];
            }
        }
    }
    logdet
}

/// True when the Gram matrix of non-target vectors is rank-deficient in
/// general position (`m > M - 1`), which pins LD near the jitter floor.
pub fn log_det_rank_deficient(members: usize, classes: usize) -> bool {
    members > classes.saturating_sub(1)
}

/// Log-determinant diversity: per sample, the matrix of L2-normalized
/// non-target probability vectors (one row per member) is formed and
/// `log det(N N^T + 1e-12 I)` averaged over samples. Higher means more
/// diverse members.
pub fn log_det_diversity(member_probs: &[Tensor], labels: &[usize]) -> Result<f64> {
    let m = member_probs.len();
    if m < 2 {
        return Err(Error::State(format!(
            "log-determinant diversity needs at least 2 members, got {m}"
        )));
    }
    for p in member_probs {
        check_eval_inputs(p, labels)?;
    }
    let classes = member_probs[0].cols();
    if classes < 2 {
        return Err(Error::Unsupported(
            "log-determinant diversity needs at least 2 classes".into(),
        ));
    }
    let n = labels.len();
    let reduced = classes - 1;
    let mut total = 0.0;
    let mut rows = vec![vec![0.0; reduced]; m];
    for (s, &y) in labels.iter().enumerate() {
        for (i, probs) in member_probs.iter().enumerate() {
            let row = probs.row(s);
            let mut t = 0;
            for (c, &p) in row.iter().enumerate() {
                if c != y {
                    rows[i][t] = p;
                    t += 1;
                }
            }
            let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-300 {
                for x in rows[i].iter_mut() {
                    *x /= norm;
                }
            }
        }
        let mut gram = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                gram[i][j] = dot + if i == j { EPSILON_D } else { 0.0 };
            }
        }
        total += logdet_spd(&mut gram);
    }
    Ok(total / n as f64)
}

/// Where the calibration temperature is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CalLevel {
    /// Divide each member's logits by T before softmax-averaging.
    #[default]
    Member,
    /// Power-scale the averaged probabilities: `p^(1/T)` renormalized.
    Mixture,
}

/// Ensemble probabilities at temperature `t`.
pub fn calibrated_mixture(member_logits: &[Tensor], t: f64, level: CalLevel) -> Result<Tensor> {
    if member_logits.is_empty() {
        return Err(Error::State("no member logits".into()));
    }
    if t <= 0.0 || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {t}"
        )));
    }
    let m = member_logits.len() as f64;
    match level {
        CalLevel::Member => {
            let mut mixture: Option<Tensor> = None;
            for logits in member_logits {
                let p = logits.softmax_rows(t)?;
                mixture = Some(match mixture {
                    None => p,
                    Some(acc) => acc.add(&p)?,
                });
            }
            Ok(mixture.unwrap().scale(1.0 / m))
        }
        CalLevel::Mixture => {
            let mut mixture: Option<Tensor> = None;
            for logits in member_logits {
                let p = logits.softmax_rows(1.0)?;
                mixture = Some(match mixture {
                    None => p,
                    Some(acc) => acc.add(&p)?,
                });
            }
            let mut mixture = mixture.unwrap().scale(1.0 / m);
            let cols = mixture.cols();
            let inv_t = 1.0 / t;
            for r in 0..mixture.rows() {
                let mut sum = 0.0;
                for c in 0..cols {
                    let v = mixture.at(r, c).powf(inv_t);
                    mixture.set(r, c, v);
                    sum += v;
                }
                for c in 0..cols {
                    mixture.set(r, c, mixture.at(r, c) / sum);
                }
            }
            Ok(mixture)
        }
    }
}

/// Result of the temperature search.
#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    pub temperature: f64,
    /// Validation NLL at the returned temperature.
    pub nll: f64,
    /// True when the validation labels contain a single class; the
    /// search is skipped and T = 1 returned.
    pub degenerate: bool,
}

/// Golden-section search for the temperature minimizing validation NLL,
/// over `log T` in `[ln 0.05, ln 20]` with tolerance 1e-4. The returned
/// temperature never has higher validation NLL than T = 1: if the search
/// cannot beat it, T = 1 is returned.
pub fn temperature_scale(
    member_logits: &[Tensor],
    labels: &[usize],
    level: CalLevel,
) -> Result<Calibration> {
    if member_logits.is_empty() {
        return Err(Error::State("no member logits".into()));
    }
    check_eval_inputs(&member_logits[0], labels)?;
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Ok(Calibration {
            temperature: 1.0,
            nll: nll(&calibrated_mixture(member_logits, 1.0, level)?, labels)?,
            degenerate: true,
        });
    }
    let f = |u: f64| -> Result<f64> {
        nll(&calibrated_mixture(member_logits, u.exp(), level)?, labels)
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LOG_T_LO, LOG_T_HI);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > LOG_T_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let t_star = ((a + b) / 2.0).exp();
    let nll_star = nll(&calibrated_mixture(member_logits, t_star, level)?, labels)?;
    let nll_one = nll(&calibrated_mixture(member_logits, 1.0, level)?, labels)?;
    if nll_one <= nll_star {
        Ok(Calibration {
            temperature: 1.0,
            nll: nll_one,
            degenerate: false,
        })
    } else {
        Ok(Calibration {
            temperature: t_star,
            nll: nll_star,
            degenerate: false,
        })
    }
}

/// All evaluation metrics for one pass. Field order is the fixed
/// serialization order for both JSON and CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub cal_nll: f64,
    pub cal_brier: f64,
    pub cal_aac: f64,
    pub disagreement: f64,
    pub log_det: f64,
    pub avg_member_accuracy: f64,
    pub optimal_temperature: f64,
    pub n_eval: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "accuracy,nll,brier,ece,cal_nll,cal_brier,cal_aac,disagreement,log_det,avg_member_accuracy,optimal_temperature,n_eval";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.accuracy,
            self.nll,
            self.brier,
            self.ece,
            self.cal_nll,
            self.cal_brier,
            self.cal_aac,
            self.disagreement,
            self.log_det,
            self.avg_member_accuracy,
            self.optimal_temperature,
            self.n_eval
        )
    }
}

/// Options for `evaluate_ensemble`.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub n_bins: usize,
    pub cal_level: CalLevel,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_bins: 15,
            cal_level: CalLevel::Member,
        }
    }
}

/// Full metric suite on a test set. The temperature is fitted on the
/// validation set when one is given; otherwise T = 1 and the calibrated
/// metrics coincide with the uncalibrated ones.
pub fn evaluate_ensemble(
    ens: &Ensemble,
    test: &Dataset,
    validation: Option<&Dataset>,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::State("empty evaluation set".into()));
    }
    let member_logits = ens.member_logits(&test.inputs)?;
    let member_probs: Vec<Tensor> = member_logits
        .iter()
        .map(|l| l.softmax_rows(1.0))
        .collect::<Result<_>>()?;
    let mixture = {
        let mut acc = Tensor::zeros(vec![test.len(), ens.output_dim()]);
        for p in &member_probs {
            acc = acc.add(p)?;
        }
        acc.scale(1.0 / ens.len() as f64)
    };

    let calibration = match validation {
        Some(val) if !val.is_empty() => {
            let val_logits = ens.member_logits(&val.inputs)?;
            temperature_scale(&val_logits, &val.labels, opts.cal_level)?
        }
        _ => Calibration {
            temperature: 1.0,
            nll: f64::NAN,
            degenerate: false,
        },
    };
    let calibrated = calibrated_mixture(&member_logits, calibration.temperature, opts.cal_level)?;

    let member_preds: Vec<Vec<usize>> = member_probs
        .iter()
        .map(|p| (0..test.len()).map(|n| argmax(p.row(n))).collect())
        .collect();
    let avg_member_accuracy = member_probs
        .iter()
        .map(|p| accuracy(p, &test.labels))
        .sum::<Result<f64>>()?
        / ens.len() as f64;

    Ok(MetricsReport {
        accuracy: accuracy(&mixture, &test.labels)?,
        nll: nll(&mixture, &test.labels)?,
        brier: brier(&mixture, &test.labels)?,
        ece: ece(&mixture, &test.labels, opts.n_bins)?,
        cal_nll: nll(&calibrated, &test.labels)?,
        cal_brier: brier(&calibrated, &test.labels)?,
        cal_aac: cal_aac(&calibrated, &test.labels)?,
        disagreement: disagreement(&member_preds)?,
        log_det: log_det_diversity(&member_probs, &test.labels)?,
        avg_member_accuracy,
        optimal_temperature: calibration.temperature,
        n_eval: test.len(),
    })
}
