//! Feature inversion: recovers an intensity-like image whose front-end
//! features match a given feature map, with a total-variation penalty.

use ndarray::{s, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Tensor;
use crate::model_graph::BlockChain;
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub tv_weight: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 1e-2,
            tv_weight: 5.0,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.tv_weight.is_finite() && self.tv_weight >= 0.0) {
            return Err(Error::Config(format!("tv_weight must be >= 0, got {}", self.tv_weight)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Anisotropic total variation of a 2-D image.
pub fn tv(image: ArrayView2<'_, f64>) -> f64 {
    let dx: f64 = image
        .slice(s![.., 1..])
        .iter()
        .zip(image.slice(s![.., ..-1]).iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let dy: f64 = image
        .slice(s![1.., ..])
        .iter()
        .zip(image.slice(s![..-1, ..]).iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    dx + dy
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// TV summed over every (sample, channel) plane, with its subgradient.
pub fn tv_with_grad(x: &Tensor) -> (f64, Tensor) {
    let (b, c, h, w) = x.dim();
    let mut grad = Tensor::zeros(x.raw_dim());
    let mut total = 0.0;
    for n in 0..b {
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), n);
            let plane = plane.index_axis(Axis(0), ch);
            total += tv(plane);
            for y in 0..h {
                for xx in 0..w {
                    if xx + 1 < w {
                        let d = sign(plane[[y, xx + 1]] - plane[[y, xx]]);
                        grad[[n, ch, y, xx + 1]] += d;
                        grad[[n, ch, y, xx]] -= d;
                    }
                    if y + 1 < h {
                        let d = sign(plane[[y + 1, xx]] - plane[[y, xx]]);
                        grad[[n, ch, y + 1, xx]] += d;
                        grad[[n, ch, y, xx]] -= d;
                    }
                }
            }
        }
    }
    (total, grad)
}

/// Objective values recorded before each update, plus the values after
/// the last one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub objective: Vec<f64>,
    pub mse: Vec<f64>,
    pub tv: Vec<f64>,
    pub final_objective: f64,
    pub final_mse: f64,
    pub final_tv: f64,
}

impl DecodeTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,objective,mse,tv\n");
        let rows = self.objective.iter().zip(&self.mse).zip(&self.tv).enumerate();
        for (i, ((o, m), t)) in rows {
            out.push_str(&format!("{i},{o},{m},{t}\n"));
        }
        out.push_str(&format!(
            "{},{},{},{}\n",
            self.objective.len(),
            self.final_objective,
            self.final_mse,
            self.final_tv
        ));
        out
    }
}

/// Seeded uniform [0, 1) image batch of the front end's input shape.
pub fn initial_image(front: &BlockChain, batch: usize, seed: u64) -> Tensor {
    let s = front.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn((batch, s.channels, s.height, s.width), |_| rng.random::<f64>())
}

fn objective(front: &BlockChain, target: &Tensor, img: &Tensor, tv_weight: f64) -> Result<(f64, f64, Tensor)> {
    let (out, tape) = front.forward_train(img)?;
    let n = out.len() as f64;
    let diff = &out - target;
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad_out = diff.mapv(|d| 2.0 * d / n);
    let grad = front.backward_input(&tape, &grad_out)?;
    let (t, tv_grad) = tv_with_grad(img);
    Ok((mse, t, grad + &(tv_grad * tv_weight)))
}

/// Minimizes MSE(front(I), h_hat) + tv_weight * TV(I) over the pixels of I
/// with Adam. Pixels are unconstrained; clamp before exporting.
pub fn decode_features(h_hat: &Tensor, front: &BlockChain, cfg: &DecodeConfig) -> Result<(Tensor, DecodeTrace)> {
    cfg.validate()?;
    let expected = front.output_shape()?;
    if h_hat.shape()[1..] != expected.to_vec()[..] {
        let mut want = vec![h_hat.shape()[0]];
        want.extend(expected.to_vec());
        return Err(Error::shape("features to decode", &want, h_hat.shape()));
    }
    if h_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features to decode".into()));
    }
    let mut img = initial_image(front, h_hat.shape()[0], cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = DecodeTrace::default();
    for it in 0..=cfg.iterations {
        let (mse, t, grad) = objective(front, h_hat, &img, cfg.tv_weight)?;
        let obj = mse + cfg.tv_weight * t;
        if !obj.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step: it,
                loss: obj,
            });
        }
        if it == cfg.iterations {
            trace.final_objective = obj;
            trace.final_mse = mse;
            trace.final_tv = t;
            break;
        }
        trace.objective.push(obj);
        trace.mse.push(mse);
        trace.tv.push(t);
        let g: Vec<f64> = grad.iter().copied().collect();
        adam.step(vec![img.as_slice_mut().expect("standard layout")], &[g])?;
    }
    Ok((img, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{LayerSpec, Shape3};
    use crate::model_graph::BlockSpec;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    #[test]
    fn tv_examples() {
        assert_eq!(tv(Array2::from_elem((3, 4), 0.7).view()), 0.0);
        assert_eq!(tv(arr2(&[[0.0, 1.0]]).view()), 1.0);
        let img = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let mut oracle = 0.0;
        for (a, b) in [((0, 0), (0, 1)), ((1, 0), (1, 1)), ((0, 0), (1, 0)), ((0, 1), (1, 1))] {
            let d: f64 = img[a] - img[b];
            oracle += d.abs();
        }
        assert_eq!(tv(img.view()), oracle);
        assert_eq!(oracle, 4.0);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let x = Tensor::from_shape_fn((1, 2, 3, 3), |(_, c, y, x)| ((c * 9 + y * 3 + x) as f64 * 0.37).sin());
        let (_, g) = tv_with_grad(&x);
        let h = 1e-7;
        for idx in [[0, 0, 1, 1], [0, 1, 0, 2], [0, 0, 2, 0]] {
            let mut up = x.clone();
            up[idx] += h;
            let mut down = x.clone();
            down[idx] -= h;
            let fd = (tv_with_grad(&up).0 - tv_with_grad(&down).0) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn tv_scales_and_ignores_offsets(v in prop::collection::vec(-5.0f64..5.0, 12), c in -3.0f64..3.0, k in -2.0f64..2.0) {
            let img = Array2::from_shape_vec((3, 4), v).unwrap();
            let base = tv(img.view());
            prop_assert!(base >= 0.0);
            prop_assert!((tv((&img * c).view()) - c.abs() * base).abs() < 1e-9 * (1.0 + base));
            prop_assert!((tv((&img + k).view()) - base).abs() < 1e-9 * (1.0 + base));
        }
    }

    fn front() -> BlockChain {
        let specs = vec![BlockSpec {
            name: "f".into(),
            layers: vec![LayerSpec::conv(1, 4, 3, 1), LayerSpec::MaxPool2d { size: 2 }],
        }];
        BlockChain::from_specs(Shape3::new(1, 6, 6), &specs, 7).unwrap()
    }

    #[test]
    fn decoding_reaches_attainable_targets() {
        let f = front();
        let truth = Tensor::from_shape_fn((1, 1, 6, 6), |(_, _, y, x)| (x * y) as f64 / 25.0);
        let h = f.forward(&truth).unwrap();
        let cfg = DecodeConfig {
            iterations: 1000,
            tv_weight: 0.0,
            ..DecodeConfig::default()
        };
        let (_, trace) = decode_features(&h, &f, &cfg).unwrap();
        assert_eq!(trace.objective.len(), 1000);
        assert!(trace.final_mse < 0.01 * trace.mse[0], "{} {}", trace.final_mse, trace.mse[0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = front();
        let h = Tensor::zeros((1, 4, 3, 3));
        let zero = DecodeConfig {
            iterations: 0,
            ..DecodeConfig::default()
        };
        assert!(decode_features(&h, &f, &zero).is_err());
        assert!(decode_features(&Tensor::zeros((1, 3, 6, 6)), &f, &DecodeConfig::default()).is_err());
    }

    #[test]
    fn initial_image_is_seeded() {
        let f = front();
        assert_eq!(initial_image(&f, 2, 4), initial_image(&f, 2, 4));
        assert_ne!(initial_image(&f, 2, 4), initial_image(&f, 2, 5));
        assert!(initial_image(&f, 1, 0).iter().all(|v| (0.0..1.0).contains(v)));
    }
}
