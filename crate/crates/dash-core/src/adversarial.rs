//! PGD attack and robust-accuracy curves.
//!
//! The attack maximizes the plain (unsmoothed) cross-entropy of the
//! deployed predictor — the ensemble's averaged softmax — by iterated
//! signed-gradient ascent, projecting back into the L-infinity ball
//! after every step:
//!
//! ```text
//! x <- clip_eps(x + step_size * sign(grad_x CE))
//! ```
//!
//! Projection clamps each coordinate of `x_adv - x_orig` to
//! `[-eps, +eps]` exactly (bitwise: the stored value is
//! `x_orig + clamped_delta`), then optionally clamps into a configured
//! data domain. Random starts draw each sample's offset from the child
//! stream `derive(sample_index)` of the attack seed, so per-sample
//! attacks are independent and the whole batch is deterministic.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::ensemble_ce_input_gradient;
use crate::metrics::accuracy;
use crate::model::{Batch, Ensemble};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// PGD configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-infinity budget; 0 disables the attack (outputs equal inputs).
    pub epsilon: f64,
    /// Per-step magnitude.
    pub step_size: f64,
    /// Iteration count.
    pub steps: usize,
    /// Start from a uniform random point inside the ball.
    pub random_start: bool,
    /// Seed for random starts.
    pub seed: u64,
    /// Optional per-dimension data-domain clamp applied after projection.
    /// Off by default: synthetic data has no natural box.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp: Option<Vec<(f64, f64)>>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 1.0 / 255.0,
            step_size: 1.0 / 255.0,
            steps: 10,
            random_start: false,
            seed: 0,
            clamp: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            problems.push(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            problems.push(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.epsilon > 0.0 && self.step_size > 2.0 * self.epsilon {
            problems.push(format!(
                "step_size {} exceeds 2 * epsilon = {}",
                self.step_size,
                2.0 * self.epsilon
            ));
        }
        if self.steps == 0 {
            problems.push("steps must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Run PGD on a batch; returns the adversarial inputs.
pub fn pgd_attack(ens: &Ensemble, batch: &Batch, config: &AttackConfig) -> Result<Tensor> {
    config.validate()?;
    let (b, d) = (batch.inputs.shape()[0], batch.inputs.shape()[1]);
    if let Some(clamp) = &config.clamp {
        if clamp.len() != d {
            return Err(Error::Dimension {
                context: "pgd_attack clamp",
                left: vec![clamp.len()],
                right: vec![d],
            });
        }
    }
    if config.epsilon == 0.0 {
        return Ok(batch.inputs.clone());
    }

    let original = &batch.inputs;
    let mut current = original.clone();
    if config.random_start {
        let base = Rng::new(config.seed);
        for n in 0..b {
            let mut rng = base.derive(n as u64);
            for c in 0..d {
                let offset = rng.uniform(-config.epsilon, config.epsilon);
                current.set(n, c, current.at(n, c) + offset);
            }
        }
        project(&mut current, original, config)?;
    }

    for step in 0..config.steps {
        let adv_batch = Batch::new(current.clone(), batch.labels.clone())?;
        let grad = ensemble_ce_input_gradient(ens, &adv_batch, 0.0)?;
        if let Some(pos) = grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "attack gradient at step {step}, sample {}",
                pos / d
            )));
        }
        for idx in 0..current.len() {
            current.data_mut()[idx] += config.step_size * sign(grad.data()[idx]);
        }
        project(&mut current, original, config)?;
    }
    Ok(current)
}

/// Clamp `current - original` into `[-eps, eps]` per coordinate, then
/// into the data domain if one is configured. `base + delta` can round
/// one ULP outside the ball, so the stored value is nudged until the
/// recomputed difference satisfies the bound bit-exactly.
fn project(current: &mut Tensor, original: &Tensor, config: &AttackConfig) -> Result<()> {
    let d = original.shape()[1];
    for idx in 0..current.len() {
        let base = original.data()[idx];
        let delta = (current.data()[idx] - base).clamp(-config.epsilon, config.epsilon);
        let mut x = base + delta;
        while x - base > config.epsilon {
            x = x.next_down();
        }
        while x - base < -config.epsilon {
            x = x.next_up();
        }
        if let Some(clamp) = &config.clamp {
            let (lo, hi) = clamp[idx % d];
            x = x.clamp(lo, hi);
        }
        current.data_mut()[idx] = x;
    }
    Ok(())
}

/// One row of the robustness curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub epsilon: f64,
    pub accuracy: f64,
}

/// Accuracy under attack per epsilon. Epsilons must be sorted ascending;
/// an epsilon of 0 reproduces clean accuracy exactly.
pub fn robust_accuracy_curve(
    ens: &Ensemble,
    data: &Dataset,
    epsilons: &[f64],
    base_config: &AttackConfig,
) -> Result<Vec<RobustnessPoint>> {
    if data.is_empty() {
        return Err(Error::State("empty dataset for attack".into()));
    }
    if epsilons.is_empty() {
        return Err(Error::Parameter("need at least one epsilon".into()));
    }
    if epsilons.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Parameter(format!(
            "epsilons must be sorted ascending, got {epsilons:?}"
        )));
    }
    let batch = Batch::new(data.inputs.clone(), data.labels.clone())?;
    let mut curve = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        if epsilon < 0.0 {
            return Err(Error::Parameter(format!("negative epsilon {epsilon}")));
        }
        let config = AttackConfig {
            epsilon,
            ..base_config.clone()
        };
        let adversarial = pgd_attack(ens, &batch, &config)?;
        let probs = ens.predict(&adversarial)?;
        curve.push(RobustnessPoint {
            epsilon,
            accuracy: accuracy(&probs, &data.labels)?,
        });
    }
    Ok(curve)
}

/// Render the curve as `epsilon,accuracy` CSV.
pub fn curve_to_csv(curve: &[RobustnessPoint]) -> String {
    let mut out = String::from("epsilon,accuracy\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.epsilon, p.accuracy));
    }
    out
}
