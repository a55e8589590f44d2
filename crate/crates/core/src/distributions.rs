//! Diagonal Gaussians and categoricals: log densities, closed-form KLs and
//! reparameterised sampling.
//!
//! The scalar API works in f64 on plain vectors and is used by oracles and
//! inspection code. The `graph` submodule has the batched, differentiable
//! forms used by the ELBO; both reduce over the last axis.

use crate::error::{CoreError, Result};
use dgmr_tensor::Rng;

pub const LOG_2PI: f64 = 1.837_877_066_409_345_3;
/// Added to softplus outputs of every variance head.
pub const VAR_FLOOR: f32 = 1e-6;
/// Variance clamp used when drawing samples.
pub const SAMPLE_VAR_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let g = Self { mean, var };
        g.validate("DiagGaussian::new")?;
        Ok(g)
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self, op: &str) -> Result<()> {
        if self.mean.len() != self.var.len() {
            return Err(CoreError::Dimension(format!(
                "{op}: mean dim {} vs var dim {}",
                self.mean.len(),
                self.var.len()
            )));
        }
        if let Some(v) = self.var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(CoreError::Domain(format!("{op}: variance {v} not strictly positive")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    pub probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(CoreError::Empty("categorical with no classes".into()));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(CoreError::Domain("categorical probability below zero".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(CoreError::Domain(format!("categorical probabilities sum to {s}")));
        }
        Ok(Self { probs })
    }

    /// Normalised exponentials of `logits`, computed with a max shift.
    pub fn from_log_weights(logits: &[f64]) -> Result<Self> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Self::new(e.into_iter().map(|v| v / s).collect())
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub fn gaussian_logpdf(x: &[f64], g: &DiagGaussian) -> Result<f64> {
    g.validate("gaussian_logpdf")?;
    if x.len() != g.dim() {
        return Err(CoreError::Dimension(format!(
            "gaussian_logpdf: x dim {} vs {}",
            x.len(),
            g.dim()
        )));
    }
    Ok(x.iter()
        .zip(&g.mean)
        .zip(&g.var)
        .map(|((x, m), v)| -0.5 * (LOG_2PI + v.ln() + (x - m) * (x - m) / v))
        .sum())
}

/// `KL[q || p]` between diagonal Gaussians.
pub fn kl_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    q.validate("kl_gaussians")?;
    p.validate("kl_gaussians")?;
    if q.dim() != p.dim() {
        return Err(CoreError::Dimension(format!(
            "kl_gaussians: q dim {} vs p dim {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut s = 0.0;
    for i in 0..q.dim() {
        let d = p.mean[i] - q.mean[i];
        s += q.var[i] / p.var[i] + d * d / p.var[i] - 1.0 + (p.var[i] / q.var[i]).ln();
    }
    Ok(0.5 * s)
}

/// `KL[c || Uniform(K)] = sum p log(p K)`, with `0 log 0 = 0`.
pub fn kl_categorical_uniform(c: &Categorical) -> f64 {
    let k = c.k() as f64;
    c.probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * k).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `mean + sqrt(var) * eps` with `eps ~ N(0, I)`.
pub fn reparam_sample(g: &DiagGaussian, rng: &mut Rng) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.var)
        .map(|(m, v)| m + v.max(SAMPLE_VAR_CLAMP).sqrt() * rng.normal() as f64)
        .collect()
}

/// Differentiable batched forms over the last axis.
pub mod graph {
    use super::{LOG_2PI, VAR_FLOOR};
    use dgmr_tensor::{Graph, Result, Tensor, Var};

    /// `softplus(raw) + VAR_FLOOR`.
    pub fn positive_var(g: &mut Graph, raw: Var) -> Result<Var> {
        let s = g.softplus(raw)?;
        g.affine(s, 1.0, VAR_FLOOR)
    }

    pub fn reparam(g: &mut Graph, mean: Var, var: Var, eps: Tensor) -> Result<Var> {
        let sd = g.sqrt(var)?;
        let e = g.constant(eps);
        let n = g.mul(sd, e)?;
        g.add(mean, n)
    }

    fn last_axis(g: &Graph, v: Var) -> usize {
        g.shape(v).len() - 1
    }

    /// Log density summed over the last axis.
    pub fn logpdf(g: &mut Graph, x: Var, mean: Var, var: Var) -> Result<Var> {
        let d = g.sub(x, mean)?;
        let d2 = g.square(d)?;
        let q = g.div(d2, var)?;
        let lv = g.log(var)?;
        let t = g.add(q, lv)?;
        let t = g.affine(t, -0.5, -0.5 * LOG_2PI as f32)?;
        let ax = last_axis(g, t);
        g.sum_axis(t, ax)
    }

    /// `KL[N(mq, vq) || N(mp, vp)]` summed over the last axis.
    pub fn kl_diag(g: &mut Graph, mq: Var, vq: Var, mp: Var, vp: Var) -> Result<Var> {
        let ratio = g.div(vq, vp)?;
        let d = g.sub(mp, mq)?;
        let d2 = g.square(d)?;
        let q = g.div(d2, vp)?;
        let lp = g.log(vp)?;
        let lq = g.log(vq)?;
        let a = g.add(ratio, q)?;
        let b = g.sub(lp, lq)?;
        let t = g.add(a, b)?;
        let t = g.affine(t, 0.5, -0.5)?;
        let ax = last_axis(g, t);
        g.sum_axis(t, ax)
    }

    /// `KL[N(m, v) || N(0, I)]` summed over the last axis.
    pub fn kl_diag_standard(g: &mut Graph, m: Var, v: Var) -> Result<Var> {
        let m2 = g.square(m)?;
        let lv = g.log(v)?;
        let a = g.add(v, m2)?;
        let t = g.sub(a, lv)?;
        let t = g.affine(t, 0.5, -0.5)?;
        let ax = last_axis(g, t);
        g.sum_axis(t, ax)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_at_mode() {
        let g = DiagGaussian::standard(1);
        let lp = gaussian_logpdf(&[0.0], &g).unwrap();
        assert!((lp + 0.5 * LOG_2PI).abs() < 1e-12);
        assert!((lp + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn logpdf_at_mean_is_normaliser() {
        let g = DiagGaussian::new(vec![1.0, -2.0, 0.5], vec![0.3, 2.0, 5.0]).unwrap();
        let lp = gaussian_logpdf(&g.mean.clone(), &g).unwrap();
        let want: f64 = g.var.iter().map(|v| -0.5 * (2.0 * std::f64::consts::PI * v).ln()).sum();
        assert!((lp - want).abs() < 1e-12);
    }

    #[test]
    fn logpdf_rejects_non_positive_var() {
        let g = DiagGaussian {
            mean: vec![0.0],
            var: vec![0.0],
        };
        assert!(matches!(gaussian_logpdf(&[0.0], &g), Err(CoreError::Domain(_))));
        assert!(DiagGaussian::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn kl_identical_is_zero() {
        let g = DiagGaussian::new(vec![0.2, 0.1], vec![1.5, 0.7]).unwrap();
        assert_eq!(kl_gaussians(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift() {
        let q = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        let p = DiagGaussian::standard(1);
        assert!((kl_gaussians(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_dim_mismatch() {
        let q = DiagGaussian::standard(2);
        let p = DiagGaussian::standard(3);
        assert!(matches!(kl_gaussians(&q, &p), Err(CoreError::Dimension(_))));
    }

    #[test]
    fn categorical_kl_values() {
        let u = Categorical::new(vec![0.25; 4]).unwrap();
        assert!(kl_categorical_uniform(&u).abs() < 1e-12);
        let one = Categorical::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((kl_categorical_uniform(&one) - 4f64.ln()).abs() < 1e-12);
        let half = Categorical::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((kl_categorical_uniform(&half) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn categorical_validates() {
        assert!(Categorical::new(vec![0.5, 0.6]).is_err());
        assert!(Categorical::new(vec![-0.1, 1.1]).is_err());
        assert!(Categorical::new(vec![]).is_err());
    }

    #[test]
    fn zero_variance_sample_is_mean() {
        let g = DiagGaussian {
            mean: vec![1.5, -3.0],
            var: vec![0.0, 0.0],
        };
        let mut rng = Rng::seed(1);
        let s = reparam_sample(&g, &mut rng);
        for (a, b) in s.iter().zip(&g.mean) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn reparam_gradient_wrt_mean_is_identity() {
        use dgmr_tensor::{Graph, Tensor};
        for i in 0..3 {
            let mut g = Graph::new();
            let m = g.leaf(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(), true);
            let v = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
            let eps = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
            let s = graph::reparam(&mut g, m, v, eps).unwrap();
            let mut c = vec![0.0; 3];
            c[i] = 1.0;
            let cv = g.constant(Tensor::new(vec![3], c.clone()).unwrap());
            let p = g.mul(s, cv).unwrap();
            let l = g.sum(p).unwrap();
            let grads = g.backward(l).unwrap();
            assert_eq!(grads.get(m).unwrap(), &c[..]);
        }
    }
}
