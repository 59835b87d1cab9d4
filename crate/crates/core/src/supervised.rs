//! Plain supervised classification: pretraining the intensity network and
//! the fully supervised baseline for a new modality.

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Tensor;
use crate::model_graph::BlockChain;
use crate::optim::Adam;
use crate::paired_data::align_shift;

/// Stacks same-shaped (C, H, W) images into a (B, C, H, W) batch.
pub fn stack(images: &[&Array3<f64>]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (c, h, w) = first.dim();
    let mut out = Tensor::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::shape("batch image", &[c, h, w], img.shape()));
        }
        out.slice_mut(s![i, .., .., ..]).assign(img);
    }
    Ok(out)
}

/// Mean softmax cross-entropy of (B, K, 1, 1) logits and its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k, h, w) = logits.dim();
    if h != 1 || w != 1 || b != labels.len() {
        return Err(Error::shape("logits", &[labels.len(), k, 1, 1], logits.shape()));
    }
    let mut grad = Tensor::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Range {
                name: "label",
                value: y,
                valid: format!("0..{k}"),
            });
        }
        let row = logits.slice(s![i, .., 0, 0]);
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            grad[[i, j, 0, 0]] = (p - f64::from(u8::from(j == y))) / b as f64;
        }
    }
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy".into()));
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random integer translation of up to this many pixels per training
    /// image (zero fill); 0 disables it.
    #[serde(default)]
    pub max_shift: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
            max_shift: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Trains `chain` in place with Adam; returns the mean loss of each epoch.
pub fn train_classifier(
    chain: &mut BlockChain,
    inputs: &[Array3<f64>],
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::shape("inputs vs labels", &[labels.len()], &[inputs.len()]));
    }
    if inputs.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let x = if cfg.max_shift > 0 {
                let m = cfg.max_shift as i64;
                let shifted = idx
                    .iter()
                    .map(|&i| align_shift(&inputs[i], rng.random_range(-m..=m), rng.random_range(-m..=m)))
                    .collect::<Result<Vec<_>>>()?;
                stack(&shifted.iter().collect::<Vec<_>>())?
            } else {
                stack(&idx.iter().map(|&i| &inputs[i]).collect::<Vec<_>>())?
            };
            let (logits, tape) = chain.forward_train(&x)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                },
                e => e,
            })?;
            let grads = chain.backward(&tape, &grad)?;
            adam.step(chain.params_mut(), &grads.0)?;
            sum += loss * idx.len() as f64;
        }
        curve.push(sum / inputs.len() as f64);
    }
    Ok(curve)
}

/// Arg-max class for every input, evaluated in batches through `forward`.
pub fn predict_with<F>(forward: F, inputs: &[Array3<f64>], batch_size: usize) -> Result<Vec<usize>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let refs: Vec<&Array3<f64>> = chunk.iter().collect();
        let logits = forward(&stack(&refs)?)?;
        for i in 0..chunk.len() {
            let row = logits.slice(s![i, .., .., ..]);
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            out.push(best.0);
        }
    }
    Ok(out)
}

pub fn predict(chain: &BlockChain, inputs: &[Array3<f64>], batch_size: usize) -> Result<Vec<usize>> {
    predict_with(|x| chain.forward(x), inputs, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{LayerSpec, Shape3};
    use crate::model_graph::BlockSpec;

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let logits = Tensor::from_shape_vec((2, 3, 1, 1), vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]).unwrap();
        let labels = [2, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 2, 0, 0], [1, 1, 0, 0]] {
            let mut up = logits.clone();
            up[idx] += h;
            let mut down = logits.clone();
            down[idx] -= h;
            let fd = (softmax_cross_entropy(&up, &labels).unwrap().0 - softmax_cross_entropy(&down, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros((1, 4, 1, 1)), &[1]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&Tensor::zeros((1, 4, 1, 1)), &[4]).is_err());
    }

    #[test]
    fn learns_a_separable_problem() {
        let specs = vec![BlockSpec {
            name: "fc".into(),
            layers: vec![LayerSpec::linear(2, 2)],
        }];
        let mut chain = BlockChain::from_specs(Shape3::new(2, 1, 1), &specs, 1).unwrap();
        let inputs: Vec<Array3<f64>> = (0..40)
            .map(|i| {
                let v = if i % 2 == 0 { 1.0 } else { -1.0 };
                Array3::from_shape_vec((2, 1, 1), vec![v, 0.1 * (i as f64 / 40.0)]).unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let cfg = ClassifierConfig {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 8,
            seed: 3,
            max_shift: 0,
        };
        let curve = train_classifier(&mut chain, &inputs, &labels, &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        assert_eq!(predict(&chain, &inputs, 16).unwrap(), labels);
    }

    #[test]
    fn stack_rejects_mixed_shapes() {
        let a = Array3::zeros((1, 2, 2));
        let b = Array3::zeros((1, 3, 2));
        assert!(stack(&[&a, &b]).is_err());
        assert_eq!(stack(&[&a, &a]).unwrap().dim(), (2, 1, 2, 2));
    }
}
