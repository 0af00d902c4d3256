use crate::error::{Error, Result};
use crate::features::PairLabel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub contrastive_weight: f64,
    pub classification_weight: f64,
}

impl LossConfig {
    pub fn self_supervised() -> Self {
        Self {
            margin: 1.0,
            contrastive_weight: 1.0,
            classification_weight: 0.0,
        }
    }

    /// The cross-entropy term is weighted down so it refines the contrastive
    /// geometry instead of inflating embedding norms.
    pub fn supervised() -> Self {
        Self {
            classification_weight: 0.01,
            ..Self::self_supervised()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.contrastive_weight >= 0.0 && self.classification_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::self_supervised()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Similar pairs: `D^2 / 2`. Dissimilar pairs: `max(0, m - D)^2 / 2`, with
/// `D` the Euclidean distance between the embeddings.
pub fn contrastive_loss(a: &[f64], b: &[f64], label: PairLabel, margin: f64) -> Result<f64> {
    contrastive_grad(a, b, label, margin).map(|(loss, _)| loss)
}

/// Loss and its gradient with respect to `a` (the gradient for `b` is the
/// negation). At `D = 0` the dissimilar term uses the zero subgradient.
pub(crate) fn contrastive_grad(a: &[f64], b: &[f64], label: PairLabel, margin: f64) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if !(margin > 0.0) {
        return Err(Error::Argument(format!("margin must be positive, got {margin}")));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = distance(a, b);
    Ok(match label {
        PairLabel::Similar => (0.5 * d * d, diff),
        PairLabel::Dissimilar => {
            let gap = (margin - d).max(0.0);
            let grad = if gap > 0.0 && d > 0.0 {
                let s = -gap / d;
                diff.iter().map(|v| v * s).collect()
            } else {
                vec![0.0; a.len()]
            };
            (0.5 * gap * gap, grad)
        }
    })
}

/// Negative log-likelihood of `true_class` under the softmax of `logits`.
pub fn classification_loss(logits: &[f64], true_class: usize) -> Result<f64> {
    classification_grad(logits, true_class).map(|(loss, _)| loss)
}

pub(crate) fn classification_grad(logits: &[f64], true_class: usize) -> Result<(f64, Vec<f64>)> {
    if true_class >= logits.len() {
        return Err(Error::Argument(format!(
            "class {true_class} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = (sum.ln() - (logits[true_class] - max)).max(0.0);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[true_class] -= 1.0;
    Ok((loss, grad))
}
