//! Gaussian-mixture VAE and its conditional variants.
//!
//! Generative model: `w ~ N(0, I)` (or `p(w|h)` for model A), `y ~ Uniform(K)`,
//! `z | w, y=k ~ N(mu_k(w), var_k(w))`, `x | z ~ N(mu(z), sigma^2 I)`.
//! Inference: `q(z|x)`, `q(w|x)` and the analytic `q(y|w,z)`.

use crate::artifact_store::{entry_text, find, restore_store, store_entries, text_entry, Entries};
use crate::distributions::{self, graph as dg, Categorical, DiagGaussian, LOG_2PI};
use crate::error::{CoreError, Result};
use dgmr_tensor::nn::Linear;
use dgmr_tensor::{Bound, Graph, OptimizerState, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditional {
    #[default]
    None,
    /// `h` enters the `w` encoder and a learned `p(w|h)`.
    ModelA,
    /// `h` enters the `z` encoder and the `z` prior.
    ModelB,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmvaeConfig {
    pub dim_x: usize,
    pub dim_z: usize,
    pub dim_w: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub sigma_dec: f32,
    pub dropout_rate: f32,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub conditional: Conditional,
    #[serde(default)]
    pub dim_h: usize,
    #[serde(default)]
    pub separate_prior_nets: bool,
}

impl GmvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        for (name, v) in [
            ("dim_x", self.dim_x),
            ("dim_z", self.dim_z),
            ("dim_w", self.dim_w),
            ("K", self.k),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.depth > 0 && self.hidden_width == 0 {
            return bad("hidden_width must be >= 1 when depth > 0".into());
        }
        if !(self.sigma_dec >= 0.0) || !self.sigma_dec.is_finite() {
            return bad(format!("sigma_dec {} must be >= 0", self.sigma_dec));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.conditional == Conditional::None && self.dim_h != 0 {
            return bad(format!("dim_h = {} on an unconditional model", self.dim_h));
        }
        Ok(())
    }

    /// Whether callers must supply a conditioning vector.
    pub fn needs_h(&self) -> bool {
        self.conditional != Conditional::None && self.dim_h > 0
    }

    /// Decoder observation variance, floored so the log density stays finite
    /// when `sigma_dec == 0`.
    pub fn obs_var(&self) -> f32 {
        (self.sigma_dec * self.sigma_dec).max(1e-12)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Sample,
    Mean,
}

#[derive(Clone, Debug)]
struct Stack {
    layers: Vec<Linear>,
}

impl Stack {
    fn new(store: &mut ParamStore, name: &str, input: usize, width: usize, depth: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut d = input;
        for i in 0..depth {
            layers.push(Linear::new(store, &format!("{name}.h{i}"), d, width, rng));
            d = width;
        }
        Self { layers }
    }

    fn out_dim(&self, input: usize) -> usize {
        self.layers.last().map_or(input, |l| l.fan_out)
    }

    fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var, drop: &mut Dropout<'_>) -> dgmr_tensor::Result<Var> {
        for l in &self.layers {
            x = l.forward(g, p, x)?;
            x = g.relu(x)?;
            if let Some(rng) = drop.rng.as_deref_mut() {
                x = g.dropout(x, drop.rate, rng)?;
            }
        }
        Ok(x)
    }
}

/// Dropout settings for one forward pass; `rng == None` disables it.
pub struct Dropout<'a> {
    pub rate: f32,
    pub rng: Option<&'a mut Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }
}

/// Trunk followed by mean and variance heads of width `out * heads`.
#[derive(Clone, Debug)]
struct GaussNet {
    trunk: Stack,
    mean: Linear,
    var: Linear,
}

impl GaussNet {
    fn new(store: &mut ParamStore, name: &str, input: usize, out: usize, cfg: &GmvaeConfig, rng: &mut Rng) -> Self {
        let trunk = Stack::new(store, name, input, cfg.hidden_width, cfg.depth, rng);
        let d = trunk.out_dim(input);
        Self {
            mean: Linear::new(store, &format!("{name}.mean"), d, out, rng),
            var: Linear::new(store, &format!("{name}.var"), d, out, rng),
            trunk,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, drop: &mut Dropout<'_>) -> dgmr_tensor::Result<(Var, Var)> {
        let t = self.trunk.forward(g, p, x, drop)?;
        let m = self.mean.forward(g, p, t)?;
        let raw = self.var.forward(g, p, t)?;
        Ok((m, dg::positive_var(g, raw)?))
    }
}

#[derive(Clone, Debug)]
enum PriorNets {
    Shared(GaussNet),
    Separate(Vec<GaussNet>),
}

/// Per-term batch means of Eq. 7's bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub kl_w: f64,
    pub total: f64,
}

/// Standard-normal draws for one ELBO evaluation, fixed up front so the
/// same noise can be replayed (common random numbers).
#[derive(Clone, Debug)]
pub struct ElboNoise {
    pub eps_z: Tensor,
    pub eps_w: Tensor,
}

impl ElboNoise {
    pub fn draw(rng: &mut Rng, batch: usize, dim_z: usize, dim_w: usize) -> Self {
        Self {
            eps_z: Tensor::new(vec![batch, dim_z], rng.normal_vec(batch * dim_z)).unwrap(),
            eps_w: Tensor::new(vec![batch, dim_w], rng.normal_vec(batch * dim_w)).unwrap(),
        }
    }
}

/// Graph handles for the batch-mean ELBO terms and the loss `-total`.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub reconstruction: Var,
    pub kl_z: Var,
    pub kl_y: Var,
    pub kl_w: Var,
    pub loss: Var,
}

impl ElboVars {
    pub fn breakdown(&self, g: &Graph) -> ElboBreakdown {
        let r = g.value(self.reconstruction).item() as f64;
        let kz = g.value(self.kl_z).item() as f64;
        let ky = g.value(self.kl_y).item() as f64;
        let kw = g.value(self.kl_w).item() as f64;
        ElboBreakdown {
            reconstruction: r,
            kl_z: kz,
            kl_y: ky,
            kl_w: kw,
            total: r - kz - ky - kw,
        }
    }

    fn check_finite(&self, g: &Graph, epoch: usize, batch: usize) -> Result<()> {
        for (term, v) in [
            ("reconstruction", self.reconstruction),
            ("kl_z", self.kl_z),
            ("kl_y", self.kl_y),
            ("kl_w", self.kl_w),
        ] {
            if !g.value(v).is_finite() {
                return Err(CoreError::Divergence {
                    term: term.into(),
                    epoch,
                    batch,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GmvaeModel {
    pub config: GmvaeConfig,
    pub store: ParamStore,
    enc_z: GaussNet,
    enc_w: GaussNet,
    prior_w: Option<GaussNet>,
    prior_z: PriorNets,
    dec: Stack,
    dec_out: Linear,
}

fn map_tensor_err(e: dgmr_tensor::TensorError, epoch: usize, batch: usize) -> CoreError {
    match e {
        dgmr_tensor::TensorError::NonFinite { op } => CoreError::Divergence {
            term: format!("op {op}"),
            epoch,
            batch,
        },
        other => other.into(),
    }
}

impl GmvaeModel {
    pub fn new(config: GmvaeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let dh = c.dim_h;
        let (zx, wx, zp) = match c.conditional {
            Conditional::None => (c.dim_x, c.dim_x, c.dim_w),
            Conditional::ModelA => (c.dim_x, c.dim_x + dh, c.dim_w),
            Conditional::ModelB => (c.dim_x + dh, c.dim_x, c.dim_w + dh),
        };
        let mut store = ParamStore::new();
        let enc_z = GaussNet::new(&mut store, "enc_z", zx, c.dim_z, c, rng);
        let enc_w = GaussNet::new(&mut store, "enc_w", wx, c.dim_w, c, rng);
        let prior_w = if c.conditional == Conditional::ModelA && dh > 0 {
            Some(GaussNet::new(&mut store, "prior_w", dh, c.dim_w, c, rng))
        } else {
            None
        };
        let prior_z = if c.separate_prior_nets {
            PriorNets::Separate(
                (0..c.k)
                    .map(|k| GaussNet::new(&mut store, &format!("prior_z{k}"), zp, c.dim_z, c, rng))
                    .collect(),
            )
        } else {
            PriorNets::Shared(GaussNet::new(&mut store, "prior_z", zp, c.dim_z * c.k, c, rng))
        };
        let dec = Stack::new(&mut store, "dec", c.dim_z, c.hidden_width, c.depth, rng);
        let dec_out = Linear::new(&mut store, "dec.mean", dec.out_dim(c.dim_z), c.dim_x, rng);
        Ok(Self {
            config,
            store,
            enc_z,
            enc_w,
            prior_w,
            prior_z,
            dec,
            dec_out,
        })
    }

    fn check_h_rows(&self, h: Option<&Tensor>, rows: usize) -> Result<()> {
        match (self.config.needs_h(), h) {
            (true, None) => Err(CoreError::Config("conditional model needs a conditioning vector h".into())),
            (false, Some(h)) if h.numel() > 0 && self.config.dim_h == 0 => {
                Err(CoreError::Config("unconditional model given a conditioning vector h".into()))
            }
            (true, Some(h)) if h.rows() != rows || h.cols() != self.config.dim_h => Err(CoreError::Dimension(format!(
                "h shape {:?}, expected [{rows}, {}]",
                h.shape(),
                self.config.dim_h
            ))),
            _ => Ok(()),
        }
    }

    fn check_x(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.dim_x {
            return Err(CoreError::Dimension(format!(
                "x shape {:?}, expected [n, {}]",
                x.shape(),
                self.config.dim_x
            )));
        }
        Ok(())
    }

    fn cat(g: &mut Graph, a: Var, h: Option<Var>) -> dgmr_tensor::Result<Var> {
        match h {
            Some(h) => g.concat(&[a, h], 1),
            None => Ok(a),
        }
    }

    /// `q(z|x(,h))` and `q(w|x(,h))` as (mean, var) pairs of `[B, d]` vars.
    pub fn encode_vars(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        h: Option<Var>,
        drop: &mut Dropout<'_>,
    ) -> dgmr_tensor::Result<((Var, Var), (Var, Var))> {
        let (hz, hw) = match self.config.conditional {
            Conditional::None => (None, None),
            Conditional::ModelA => (None, h),
            Conditional::ModelB => (h, None),
        };
        let xz = Self::cat(g, x, hz)?;
        let qz = self.enc_z.forward(g, p, xz, drop)?;
        let xw = Self::cat(g, x, hw)?;
        let qw = self.enc_w.forward(g, p, xw, drop)?;
        Ok((qz, qw))
    }

    /// Component means and variances, each `[B, K, dim_z]`.
    pub fn prior_vars(
        &self,
        g: &mut Graph,
        p: &Bound,
        w: Var,
        h: Option<Var>,
        drop: &mut Dropout<'_>,
    ) -> dgmr_tensor::Result<(Var, Var)> {
        let hz = if self.config.conditional == Conditional::ModelB { h } else { None };
        let input = Self::cat(g, w, hz)?;
        let b = g.shape(w)[0];
        let (k, dz) = (self.config.k, self.config.dim_z);
        match &self.prior_z {
            PriorNets::Shared(net) => {
                let (m, v) = net.forward(g, p, input, drop)?;
                Ok((g.reshape(m, &[b, k, dz])?, g.reshape(v, &[b, k, dz])?))
            }
            PriorNets::Separate(nets) => {
                let mut ms = Vec::with_capacity(k);
                let mut vs = Vec::with_capacity(k);
                for net in nets {
                    let (m, v) = net.forward(g, p, input, drop)?;
                    ms.push(g.reshape(m, &[b, 1, dz])?);
                    vs.push(g.reshape(v, &[b, 1, dz])?);
                }
                Ok((g.concat(&ms, 1)?, g.concat(&vs, 1)?))
            }
        }
    }

    pub fn decode_var(&self, g: &mut Graph, p: &Bound, z: Var, drop: &mut Dropout<'_>) -> dgmr_tensor::Result<Var> {
        let t = self.dec.forward(g, p, z, drop)?;
        self.dec_out.forward(g, p, t)
    }

    /// Builds the batch ELBO on `g` using the supplied noise.
    pub fn elbo_vars(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        h: Option<Var>,
        noise: &ElboNoise,
        drop: &mut Dropout<'_>,
    ) -> dgmr_tensor::Result<ElboVars> {
        let c = &self.config;
        let b = g.shape(x)[0];
        let ((mz, vz), (mw, vw)) = self.encode_vars(g, p, x, h, drop)?;
        let z = dg::reparam(g, mz, vz, noise.eps_z.clone())?;
        let w = dg::reparam(g, mw, vw, noise.eps_w.clone())?;

        let (pm, pv) = self.prior_vars(g, p, w, h, drop)?;
        let z3 = g.reshape(z, &[b, 1, c.dim_z])?;
        let log_pz = dg::logpdf(g, z3, pm, pv)?;
        let log_q = g.log_softmax(log_pz)?;
        let q = g.exp(log_q)?;

        let mz3 = g.reshape(mz, &[b, 1, c.dim_z])?;
        let vz3 = g.reshape(vz, &[b, 1, c.dim_z])?;
        let kl_k = dg::kl_diag(g, mz3, vz3, pm, pv)?;
        let weighted = g.mul(q, kl_k)?;
        let kl_z = g.sum_axis(weighted, 1)?;

        let shifted = g.affine(log_q, 1.0, (c.k as f32).ln())?;
        let qlq = g.mul(q, shifted)?;
        let kl_y = g.sum_axis(qlq, 1)?;

        let kl_w = match (&self.prior_w, h) {
            (Some(net), Some(h)) => {
                let (pwm, pwv) = net.forward(g, p, h, drop)?;
                dg::kl_diag(g, mw, vw, pwm, pwv)?
            }
            _ => dg::kl_diag_standard(g, mw, vw)?,
        };

        let mu = self.decode_var(g, p, z, drop)?;
        let var = c.obs_var();
        let d = g.sub(x, mu)?;
        let d2 = g.square(d)?;
        let t = g.affine(d2, -0.5 / var, -0.5 * (LOG_2PI as f32 + var.ln()))?;
        let recon = g.sum_axis(t, 1)?;

        let reconstruction = g.mean(recon)?;
        let kl_z = g.mean(kl_z)?;
        let kl_y = g.mean(kl_y)?;
        let kl_w = g.mean(kl_w)?;
        let kl = g.add(kl_z, kl_y)?;
        let kl = g.add(kl, kl_w)?;
        let loss = g.sub(kl, reconstruction)?;
        Ok(ElboVars {
            reconstruction,
            kl_z,
            kl_y,
            kl_w,
            loss,
        })
    }

    fn row_tensor(v: &[f32]) -> Result<Tensor> {
        Ok(Tensor::new(vec![1, v.len().max(1)], if v.is_empty() { vec![0.0] } else { v.to_vec() })?)
    }

    fn h_var(&self, g: &mut Graph, h: Option<&Tensor>) -> Option<Var> {
        if self.config.dim_h == 0 {
            return None;
        }
        h.map(|h| g.constant(h.clone()))
    }

    fn single_h(&self, h: Option<&[f32]>) -> Result<Option<Tensor>> {
        match h {
            Some(h) if !h.is_empty() => {
                if h.len() != self.config.dim_h {
                    return Err(CoreError::Dimension(format!(
                        "h has {} entries, expected {}",
                        h.len(),
                        self.config.dim_h
                    )));
                }
                Ok(Some(Self::row_tensor(h)?))
            }
            Some(_) | None => {
                if self.config.needs_h() {
                    Err(CoreError::Config("conditional model needs a conditioning vector h".into()))
                } else {
                    Ok(None)
                }
            }
        }
    }

    fn single_x(&self, x: &[f32], dim: usize, what: &str) -> Result<Tensor> {
        if x.len() != dim {
            return Err(CoreError::Dimension(format!("{what} has {} entries, expected {dim}", x.len())));
        }
        Self::row_tensor(x)
    }

    fn gaussian(g: &Graph, m: Var, v: Var, row: usize) -> DiagGaussian {
        let d = g.value(m).cols();
        let mv = &g.value(m).data()[row * d..(row + 1) * d];
        let vv = &g.value(v).data()[row * d..(row + 1) * d];
        DiagGaussian {
            mean: mv.iter().map(|&a| a as f64).collect(),
            var: vv.iter().map(|&a| a as f64).collect(),
        }
    }

    pub fn encode(&self, x: &[f32], h: Option<&[f32]>) -> Result<(DiagGaussian, DiagGaussian)> {
        let xt = self.single_x(x, self.config.dim_x, "x")?;
        let ht = self.single_h(h)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xv = g.constant(xt);
        let hv = self.h_var(&mut g, ht.as_ref());
        let ((mz, vz), (mw, vw)) = self.encode_vars(&mut g, &p, xv, hv, &mut Dropout::off())?;
        Ok((Self::gaussian(&g, mz, vz, 0), Self::gaussian(&g, mw, vw, 0)))
    }

    /// Means and variances of every component at `w`, as `K` Gaussians.
    pub fn prior_components(&self, w: &[f32], h: Option<&[f32]>) -> Result<Vec<DiagGaussian>> {
        let wt = self.single_x(w, self.config.dim_w, "w")?;
        let ht = self.single_h(h)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let wv = g.constant(wt);
        let hv = self.h_var(&mut g, ht.as_ref());
        let (pm, pv) = self.prior_vars(&mut g, &p, wv, hv, &mut Dropout::off())?;
        let dz = self.config.dim_z;
        let (md, vd) = (g.value(pm).data(), g.value(pv).data());
        Ok((0..self.config.k)
            .map(|k| DiagGaussian {
                mean: md[k * dz..(k + 1) * dz].iter().map(|&a| a as f64).collect(),
                var: vd[k * dz..(k + 1) * dz].iter().map(|&a| a as f64).collect(),
            })
            .collect())
    }

    pub fn prior_component(&self, w: &[f32], k: usize, h: Option<&[f32]>) -> Result<DiagGaussian> {
        if k >= self.config.k {
            return Err(CoreError::Config(format!(
                "component {k} out of range for K = {}",
                self.config.k
            )));
        }
        Ok(self.prior_components(w, h)?.swap_remove(k))
    }

    /// `q(y|w,z)`: softmax over components of `log p(z | w, y=k)`, in f64.
    pub fn posterior_y(&self, z: &[f32], w: &[f32], h: Option<&[f32]>) -> Result<Categorical> {
        if z.len() != self.config.dim_z {
            return Err(CoreError::Dimension(format!(
                "z has {} entries, expected {}",
                z.len(),
                self.config.dim_z
            )));
        }
        let zf: Vec<f64> = z.iter().map(|&a| a as f64).collect();
        let logs = self
            .prior_components(w, h)?
            .iter()
            .map(|c| distributions::gaussian_logpdf(&zf, c))
            .collect::<Result<Vec<f64>>>()?;
        Categorical::from_log_weights(&logs)
    }

    pub fn decode(&self, z: &[f32]) -> Result<DiagGaussian> {
        let zt = self.single_x(z, self.config.dim_z, "z")?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let zv = g.constant(zt);
        let mu = self.decode_var(&mut g, &p, zv, &mut Dropout::off())?;
        let s = self.config.sigma_dec as f64;
        Ok(DiagGaussian {
            mean: g.value(mu).data().iter().map(|&a| a as f64).collect(),
            var: vec![s * s; self.config.dim_x],
        })
    }

    /// Evaluation-mode ELBO (dropout off) with fresh noise from `rng`.
    pub fn elbo(&self, x: &Tensor, h: Option<&Tensor>, rng: &mut Rng) -> Result<ElboBreakdown> {
        self.check_x(x)?;
        if x.rows() == 0 {
            return Err(CoreError::Empty("elbo on an empty batch".into()));
        }
        self.check_h_rows(h, x.rows())?;
        let noise = ElboNoise::draw(rng, x.rows(), self.config.dim_z, self.config.dim_w);
        self.elbo_with_noise(x, h, &noise)
    }

    pub fn elbo_with_noise(&self, x: &Tensor, h: Option<&Tensor>, noise: &ElboNoise) -> Result<ElboBreakdown> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let hv = self.h_var(&mut g, h);
        let vars = self
            .elbo_vars(&mut g, &p, xv, hv, noise, &mut Dropout::off())
            .map_err(|e| map_tensor_err(e, 0, 0))?;
        vars.check_finite(&g, 0, 0)?;
        Ok(vars.breakdown(&g))
    }

    /// Project-and-reconstruct for a batch `[n, dim_x]`. Noise is drawn
    /// row-major: all `z` draws, then all observation draws.
    pub fn reconstruct_batch(&self, x: &Tensor, h: Option<&Tensor>, rng: &mut Rng, mode: NoiseMode) -> Result<Tensor> {
        self.check_x(x)?;
        self.check_h_rows(h, x.rows())?;
        let n = x.rows();
        let c = &self.config;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let hv = self.h_var(&mut g, h);
        let ((mz, vz), _) = self.encode_vars(&mut g, &p, xv, hv, &mut Dropout::off())?;
        let z = match mode {
            NoiseMode::Mean => mz,
            NoiseMode::Sample => {
                let eps = Tensor::new(vec![n, c.dim_z], rng.normal_vec(n * c.dim_z))?;
                dg::reparam(&mut g, mz, vz, eps)?
            }
        };
        let mu = self.decode_var(&mut g, &p, z, &mut Dropout::off())?;
        let mut out = g.value(mu).clone();
        if mode == NoiseMode::Sample && c.sigma_dec > 0.0 {
            let s = c.sigma_dec;
            let noise = rng.normal_vec(out.numel());
            out.data_mut().iter_mut().zip(noise).for_each(|(o, e)| *o += s * e);
        }
        Ok(out)
    }

    pub fn reconstruct(&self, x: &[f32], h: Option<&[f32]>, rng: &mut Rng, mode: NoiseMode) -> Result<Vec<f32>> {
        let xt = self.single_x(x, self.config.dim_x, "x")?;
        let ht = self.single_h(h)?;
        Ok(self.reconstruct_batch(&xt, ht.as_ref(), rng, mode)?.into_vec())
    }

    /// Hard assignments `argmax_k q(y=k | w, z)` with `z`, `w` at their
    /// posterior means.
    pub fn assign_clusters(&self, x: &Tensor, h: Option<&Tensor>) -> Result<Vec<usize>> {
        self.check_x(x)?;
        self.check_h_rows(h, x.rows())?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let hv = self.h_var(&mut g, h);
        let drop = &mut Dropout::off();
        let ((mz, _), (mw, _)) = self.encode_vars(&mut g, &p, xv, hv, drop)?;
        let (pm, pv) = self.prior_vars(&mut g, &p, mw, hv, drop)?;
        let b = x.rows();
        let z3 = g.reshape(mz, &[b, 1, self.config.dim_z])?;
        let lp = dg::logpdf(&mut g, z3, pm, pv)?;
        let k = self.config.k;
        Ok(g.value(lp)
            .data()
            .chunks(k)
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn to_entries(&self) -> Result<Entries> {
        let cfg = serde_json::to_string(&self.config).map_err(|e| CoreError::Format(e.to_string()))?;
        let mut e = vec![text_entry("__config__", &cfg)];
        e.extend(store_entries(&self.store));
        Ok(e)
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let cfg = find(entries, "__config__").ok_or_else(|| CoreError::Format("checkpoint has no __config__".into()))?;
        let cfg: GmvaeConfig =
            serde_json::from_str(&entry_text(cfg)?).map_err(|e| CoreError::Format(format!("__config__: {e}")))?;
        let mut m = Self::new(cfg, &mut Rng::seed(0))?;
        restore_store(&mut m.store, entries)?;
        Ok(m)
    }

    /// Zeroes the final mean and variance layers of both encoders.
    pub fn zero_encoder_heads(&mut self) {
        for net in [&self.enc_z, &self.enc_w] {
            net.mean.zero(&mut self.store);
            net.var.zero(&mut self.store);
        }
    }
}

/// Per-epoch training-set means.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<ElboBreakdown>,
}

/// One epoch of minibatch Adam on `-ELBO`.
pub fn train_epoch(
    model: &mut GmvaeModel,
    opt: &mut OptimizerState,
    x: &Tensor,
    h: Option<&Tensor>,
    epoch: usize,
    rng: &mut Rng,
) -> Result<ElboBreakdown> {
    let n = x.rows();
    let bs = model.config.batch_size.min(n);
    let order = rng.permutation(n);
    let mut acc = ElboBreakdown::default();
    let mut seen = 0usize;
    for (bi, idx) in order.chunks(bs).enumerate() {
        let xb = x.select_rows(idx)?;
        let hb = match h {
            Some(h) if model.config.dim_h > 0 => Some(h.select_rows(idx)?),
            _ => None,
        };
        let noise = ElboNoise::draw(rng, idx.len(), model.config.dim_z, model.config.dim_w);
        let mut drop_rng = rng.fork();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let xv = g.constant(xb);
        let hv = hb.map(|t| g.constant(t));
        let mut drop = Dropout {
            rate: model.config.dropout_rate,
            rng: if model.config.dropout_rate > 0.0 { Some(&mut drop_rng) } else { None },
        };
        let vars = model
            .elbo_vars(&mut g, &p, xv, hv, &noise, &mut drop)
            .map_err(|e| map_tensor_err(e, epoch, bi))?;
        vars.check_finite(&g, epoch, bi)?;
        let b = vars.breakdown(&g);
        let grads = g.backward(vars.loss).map_err(|e| map_tensor_err(e, epoch, bi))?;
        model.store.accumulate(&p, &grads);
        opt.step(&mut model.store).map_err(|e| match e {
            dgmr_tensor::TensorError::NonFiniteGrad { param } => CoreError::Divergence {
                term: format!("gradient of {param}"),
                epoch,
                batch: bi,
            },
            other => other.into(),
        })?;
        let w = idx.len() as f64;
        acc.reconstruction += b.reconstruction * w;
        acc.kl_z += b.kl_z * w;
        acc.kl_y += b.kl_y * w;
        acc.kl_w += b.kl_w * w;
        seen += idx.len();
    }
    let s = seen as f64;
    acc.reconstruction /= s;
    acc.kl_z /= s;
    acc.kl_y /= s;
    acc.kl_w /= s;
    acc.total = acc.reconstruction - acc.kl_z - acc.kl_y - acc.kl_w;
    Ok(acc)
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(x: &Tensor, h: Option<&Tensor>, cfg: &GmvaeConfig, rng: &mut Rng) -> Result<(GmvaeModel, TrainLog)> {
    let mut model = GmvaeModel::new(cfg.clone(), rng)?;
    model.check_x(x)?;
    if x.rows() == 0 {
        return Err(CoreError::Empty("gmvae training set".into()));
    }
    model.check_h_rows(h, x.rows())?;
    let mut opt = OptimizerState::adam(cfg.learning_rate);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        log.epochs.push(train_epoch(&mut model, &mut opt, x, h, epoch, rng)?);
    }
    Ok((model, log))
}

/// A conditioning pair: `h = state_i`, `x = state_{i+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondPair {
    pub h: Vec<f32>,
    pub x: Vec<f32>,
}

/// All consecutive pairs within each sequence; sequences shorter than two
/// contribute nothing.
pub fn cond_pair_dataset(states: &[Vec<Vec<f32>>]) -> Vec<CondPair> {
    states
        .iter()
        .flat_map(|seq| {
            seq.windows(2).map(|w| CondPair {
                h: w[0].clone(),
                x: w[1].clone(),
            })
        })
        .collect()
}
