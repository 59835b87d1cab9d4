//! Feature-matching losses: reconstruction (FRL), evaluation (FEL), the
//! mean-subtracted Gram style loss (FSL) and their weighted total.
//!
//! All mean-squared errors average over every element. Gram matrices are
//! summed over the batch and are not normalized by spatial size.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Tensor;

/// Feature tensor of shape (batch, channels, height, width).
pub type FeatureMap = Tensor;

/// Values of gamma_h accepted without an explicit override.
pub const GAMMA_H_CHOICES: [f64; 3] = [1e5, 1e6, 1e7];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_h: f64,
    pub gamma_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma_h: 1e6,
            gamma_r: 1e7,
        }
    }
}

impl LossWeights {
    /// Rejects negative or non-finite weights; unless `allow_custom_gamma_h`,
    /// gamma_h must be one of [`GAMMA_H_CHOICES`].
    pub fn validate(&self, allow_custom_gamma_h: bool) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_h", self.gamma_h),
            ("gamma_r", self.gamma_r),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !allow_custom_gamma_h && !GAMMA_H_CHOICES.contains(&self.gamma_h) {
            return Err(Error::Config(format!(
                "gamma_h must be one of {GAMMA_H_CHOICES:?} unless overridden, got {}",
                self.gamma_h
            )));
        }
        Ok(())
    }
}

/// Which loss terms take part in the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossTerms {
    pub frl: bool,
    pub fel: bool,
    pub fsl: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        frl: true,
        fel: true,
        fsl: true,
    };

    pub fn any(&self) -> bool {
        self.frl || self.fel || self.fsl
    }

    /// The seven non-empty subsets, singletons first, then pairs, then all three.
    pub fn nonempty_subsets() -> Vec<LossTerms> {
        let t = |frl, fel, fsl| LossTerms { frl, fel, fsl };
        vec![
            t(true, false, false),
            t(false, true, false),
            t(false, false, true),
            t(true, true, false),
            t(true, false, true),
            t(false, true, true),
            t(true, true, true),
        ]
    }

    /// Weights with disabled terms zeroed.
    pub fn mask(&self, w: &LossWeights) -> LossWeights {
        LossWeights {
            alpha: if self.frl { w.alpha } else { 0.0 },
            beta: if self.fel { w.beta } else { 0.0 },
            gamma_h: if self.fsl { w.gamma_h } else { 0.0 },
            gamma_r: if self.fsl { w.gamma_r } else { 0.0 },
        }
    }
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.frl, "FRL"), (self.fel, "FEL"), (self.fsl, "FSL")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl FromStr for LossTerms {
    type Err = Error;

    /// Parses lists such as `frl,fel`, `FRL+FSL` or `all`.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = LossTerms {
            frl: false,
            fel: false,
            fsl: false,
        };
        for part in s.split([',', '+', ' ']).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "frl" => t.frl = true,
                "fel" => t.fel = true,
                "fsl" => t.fsl = true,
                "all" => t = LossTerms::ALL,
                other => return Err(Error::Config(format!("unknown loss term {other:?}"))),
            }
        }
        if !t.any() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(t)
    }
}

/// Per-term loss values. `fsl` already includes the gamma weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub frl: f64,
    pub fel: f64,
    pub fsl: f64,
    pub total: f64,
}

fn check_pair(a: &FeatureMap, b: &FeatureMap, context: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::Invalid(format!("{context}: empty feature map")));
    }
    check_finite(a, context)?;
    check_finite(b, context)
}

fn check_finite(a: &FeatureMap, context: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

fn mse_unchecked(a: &FeatureMap, b: &FeatureMap) -> f64 {
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// d MSE(target, pred) / d pred.
fn mse_grad(target: &FeatureMap, pred: &FeatureMap) -> FeatureMap {
    let n = pred.len() as f64;
    let mut g = pred - target;
    g.mapv_inplace(|v| 2.0 * v / n);
    g
}

/// Feature reconstruction loss, MSE(H, Ĥ).
pub fn frl(h: &FeatureMap, h_hat: &FeatureMap) -> Result<f64> {
    check_pair(h, h_hat, "FRL")?;
    Ok(mse_unchecked(h, h_hat))
}

/// Feature evaluation loss, MSE(R, R̂), where R̂ = N_mid(Ĥ).
pub fn fel(r: &FeatureMap, r_hat: &FeatureMap) -> Result<f64> {
    check_pair(r, r_hat, "FEL")?;
    Ok(mse_unchecked(r, r_hat))
}

/// Channel vectors of each sample, row-centred: one (C, H*W) matrix per sample.
fn centred_channels(f: &FeatureMap) -> Vec<Array2<f64>> {
    let (b, c, h, w) = f.dim();
    let p = h * w;
    let f = f.as_standard_layout();
    let s = f.as_slice().expect("standard layout");
    (0..b)
        .map(|i| {
            let mut m = ArrayView2::from_shape((c, p), &s[i * c * p..(i + 1) * c * p])
                .expect("slice sized to one sample")
                .to_owned();
            for mut row in m.rows_mut() {
                let mean = row.sum() / p as f64;
                row.mapv_inplace(|v| v - mean);
            }
            m
        })
        .collect()
}

/// Mean-subtracted Gram matrix summed over the batch:
/// `G[i, j] = sum_t (F_t[i] - mean F_t[i]) . (F_t[j] - mean F_t[j])`.
pub fn gram(f: &FeatureMap) -> Result<Array2<f64>> {
    let (b, c, h, w) = f.dim();
    if b == 0 || c == 0 || h * w == 0 {
        return Err(Error::Invalid(format!(
            "gram of empty tensor with shape {:?}",
            f.shape()
        )));
    }
    check_finite(f, "gram")?;
    let mut g = Array2::<f64>::zeros((c, c));
    for x in centred_channels(f) {
        g += &x.dot(&x.t());
    }
    Ok(g)
}

fn gram_mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// `gamma * MSE(Gram(target), Gram(pred))` and its gradient with respect to `pred`.
fn weighted_gram_loss(
    target: &FeatureMap,
    pred: &FeatureMap,
    gamma: f64,
) -> Result<(f64, FeatureMap)> {
    let gt = gram(target)?;
    let (b, c, h, w) = pred.dim();
    let p = h * w;
    let centred = centred_channels(pred);
    let mut gp = Array2::<f64>::zeros((c, c));
    for x in &centred {
        gp += &x.dot(&x.t());
    }
    let value = gamma * gram_mse(&gt, &gp);
    // dL/dG = 2 gamma (Gp - Gt) / C^2, symmetric, so dL/dX~ = 2 (dL/dG) X~.
    let scale = 2.0 * gamma / (c * c) as f64;
    let dg = (&gp - &gt).mapv(|v| v * scale);
    let mut grad = Tensor::zeros((b, c, h, w));
    {
        let gs = grad.as_slice_mut().expect("fresh tensor");
        for (i, x) in centred.iter().enumerate() {
            let mut dx = dg.dot(x);
            dx.mapv_inplace(|v| 2.0 * v);
            // Backward through the centring step.
            for mut row in dx.rows_mut() {
                let mean = row.sum() / p as f64;
                row.mapv_inplace(|v| v - mean);
            }
            gs[i * c * p..(i + 1) * c * p]
                .copy_from_slice(dx.as_slice().expect("gemm output is contiguous"));
        }
    }
    Ok((value, grad))
}

/// Feature style loss,
/// `gamma_h * MSE(Gram(H), Gram(Ĥ)) + gamma_r * MSE(Gram(R), Gram(R̂))`.
pub fn fsl(
    h: &FeatureMap,
    h_hat: &FeatureMap,
    r: &FeatureMap,
    r_hat: &FeatureMap,
    gamma_h: f64,
    gamma_r: f64,
) -> Result<f64> {
    check_pair(h, h_hat, "FSL (front-end features)")?;
    check_pair(r, r_hat, "FSL (middle-net features)")?;
    let lh = gamma_h * gram_mse(&gram(h)?, &gram(h_hat)?);
    let lr = gamma_r * gram_mse(&gram(r)?, &gram(r_hat)?);
    Ok(lh + lr)
}

/// `alpha * FRL + beta * FEL + FSL` with the per-term breakdown.
pub fn total_loss(
    h: &FeatureMap,
    h_hat: &FeatureMap,
    r: &FeatureMap,
    r_hat: &FeatureMap,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let frl = frl(h, h_hat)?;
    let fel = fel(r, r_hat)?;
    let fsl = fsl(h, h_hat, r, r_hat, w.gamma_h, w.gamma_r)?;
    Ok(LossBreakdown {
        frl,
        fel,
        fsl,
        total: w.alpha * frl + w.beta * fel + fsl,
    })
}

/// Loss value plus gradients with respect to Ĥ (direct terms only) and R̂.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub breakdown: LossBreakdown,
    pub d_h_hat: FeatureMap,
    pub d_r_hat: FeatureMap,
}

/// Total loss over the enabled `terms` with analytic gradients.
///
/// The breakdown always reports all three raw term values (FSL with the
/// configured gammas); `total` and the gradients include enabled terms only.
/// The gradient through R̂ = N_mid(Ĥ) is left to the caller.
pub fn total_loss_with_grads(
    h: &FeatureMap,
    h_hat: &FeatureMap,
    r: &FeatureMap,
    r_hat: &FeatureMap,
    w: &LossWeights,
    terms: LossTerms,
) -> Result<LossGrads> {
    check_pair(h, h_hat, "front-end features")?;
    check_pair(r, r_hat, "middle-net features")?;
    let frl = mse_unchecked(h, h_hat);
    let fel = mse_unchecked(r, r_hat);
    let (style_h, g_style_h) = weighted_gram_loss(h, h_hat, w.gamma_h)?;
    let (style_r, g_style_r) = weighted_gram_loss(r, r_hat, w.gamma_r)?;
    let fsl = style_h + style_r;

    let mut total = 0.0;
    let mut d_h_hat = Tensor::zeros(h_hat.raw_dim());
    let mut d_r_hat = Tensor::zeros(r_hat.raw_dim());
    if terms.frl {
        total += w.alpha * frl;
        d_h_hat.scaled_add(w.alpha, &mse_grad(h, h_hat));
    }
    if terms.fel {
        total += w.beta * fel;
        d_r_hat.scaled_add(w.beta, &mse_grad(r, r_hat));
    }
    if terms.fsl {
        total += fsl;
        d_h_hat += &g_style_h;
        d_r_hat += &g_style_r;
    }
    Ok(LossGrads {
        breakdown: LossBreakdown {
            frl,
            fel,
            fsl,
            total,
        },
        d_h_hat,
        d_r_hat,
    })
}

/// FRL gradient with respect to Ĥ.
pub fn frl_grad(h: &FeatureMap, h_hat: &FeatureMap) -> Result<FeatureMap> {
    check_pair(h, h_hat, "FRL")?;
    Ok(mse_grad(h, h_hat))
}

/// FEL gradient with respect to R̂.
pub fn fel_grad(r: &FeatureMap, r_hat: &FeatureMap) -> Result<FeatureMap> {
    check_pair(r, r_hat, "FEL")?;
    Ok(mse_grad(r, r_hat))
}

/// Gradient of `gamma * MSE(Gram(target), Gram(pred))` with respect to `pred`.
pub fn style_grad(target: &FeatureMap, pred: &FeatureMap, gamma: f64) -> Result<FeatureMap> {
    check_pair(target, pred, "FSL")?;
    Ok(weighted_gram_loss(target, pred, gamma)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fm(values: &[f64], dims: (usize, usize, usize, usize)) -> FeatureMap {
        Tensor::from_shape_vec(dims, values.to_vec()).unwrap()
    }

    #[test]
    fn frl_hand_value_and_symmetry() {
        let h = fm(&[1.0, 2.0], (1, 1, 1, 2));
        let hh = fm(&[3.0, 2.0], (1, 1, 1, 2));
        assert_eq!(frl(&h, &hh).unwrap(), 2.0);
        assert_eq!(frl(&hh, &h).unwrap(), 2.0);
        assert_eq!(frl(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn fel_constant_offset() {
        let r = Tensor::from_shape_fn((2, 3, 2, 2), |(a, b, c, d)| (a + 2 * b + c * d) as f64);
        let r_hat = r.mapv(|v| v + 0.75);
        assert!((fel(&r, &r_hat).unwrap() - 0.5625).abs() < 1e-15);
        assert_eq!(fel(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = Tensor::zeros((1, 2, 2, 2));
        let b = Tensor::zeros((1, 2, 2, 3));
        assert!(matches!(frl(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(fel(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(fsl(&a, &b, &a, &a, 1.0, 1.0).is_err());
    }

    #[test]
    fn non_finite_features_rejected() {
        let a = Tensor::zeros((1, 1, 1, 2));
        let b = fm(&[f64::NAN, 0.0], (1, 1, 1, 2));
        assert!(matches!(frl(&a, &b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gram_hand_example() {
        // ch0 = [1, 3] -> [-1, 1]; ch1 = [2, 2] -> [0, 0].
        let f = fm(&[1.0, 3.0, 2.0, 2.0], (1, 2, 1, 2));
        assert_eq!(gram(&f).unwrap(), array![[2.0, 0.0], [0.0, 0.0]]);
        assert_eq!(gram(&Tensor::zeros((2, 3, 2, 2))).unwrap(), Array2::<f64>::zeros((3, 3)));
    }

    #[test]
    fn gram_of_empty_tensor_errors() {
        assert!(gram(&Tensor::zeros((1, 0, 2, 2))).is_err());
        assert!(gram(&Tensor::zeros((0, 2, 2, 2))).is_err());
    }

    #[test]
    fn fsl_hand_example() {
        let f = fm(&[1.0, 3.0, 2.0, 2.0], (1, 2, 1, 2));
        let z = Tensor::zeros((1, 2, 1, 2));
        assert_eq!(fsl(&f, &z, &z, &z, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(fsl(&f, &z, &f, &z, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(fsl(&f, &f, &z, &z, 1e6, 1e7).unwrap(), 0.0);
    }

    #[test]
    fn total_with_style_disabled_is_frl_plus_fel() {
        let h = Tensor::from_shape_fn((2, 2, 2, 2), |(a, b, c, d)| (a * 3 + b + c + d) as f64 * 0.1);
        let h_hat = h.mapv(|v| v * 1.5 - 0.2);
        let r = h.mapv(|v| v + 1.0);
        let r_hat = h_hat.mapv(|v| v.sin());
        let w = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma_h: 0.0,
            gamma_r: 0.0,
        };
        let b = total_loss(&h, &h_hat, &r, &r_hat, &w).unwrap();
        assert_eq!(b.total, frl(&h, &h_hat).unwrap() + fel(&r, &r_hat).unwrap());
    }

    #[test]
    fn parse_loss_terms() {
        assert_eq!("frl,fel,fsl".parse::<LossTerms>().unwrap(), LossTerms::ALL);
        assert_eq!("all".parse::<LossTerms>().unwrap(), LossTerms::ALL);
        let t: LossTerms = "FEL+FSL".parse().unwrap();
        assert_eq!(t.to_string(), "FEL+FSL");
        assert!("".parse::<LossTerms>().is_err());
        assert!("mse".parse::<LossTerms>().is_err());
    }

    #[test]
    fn seven_distinct_subsets() {
        let s = LossTerms::nonempty_subsets();
        assert_eq!(s.len(), 7);
        let unique: std::collections::HashSet<_> = s.iter().collect();
        assert_eq!(unique.len(), 7);
        assert!(s.iter().all(LossTerms::any));
    }

    #[test]
    fn gamma_h_restriction() {
        let mut w = LossWeights::default();
        assert!(w.validate(false).is_ok());
        w.gamma_h = 3.0;
        assert!(w.validate(false).is_err());
        assert!(w.validate(true).is_ok());
        w.alpha = -1.0;
        assert!(w.validate(true).is_err());
    }
}
