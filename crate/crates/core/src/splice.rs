//! Snapshot a host site, train a DGM on it, splice it back as a layer and
//! fine-tune what sits above.

use crate::artifact_store::{CurveLog, Split, Term};
use crate::error::{CoreError, Result};
use crate::gmvae::{cond_pair_dataset, Conditional, GmvaeModel, NoiseMode};
use crate::hosts::{HookFactory, Host, HostKind, Location, SiteHook, Tap};
use dgmr_tensor::{Graph, OptimizerState, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenMeta {
    pub host_checkpoint_id: String,
    pub site: String,
    pub corpus_id: String,
    pub count: usize,
    pub dim: usize,
    pub cond_dim: Option<usize>,
}

/// Hidden vectors from one site, one row per real token, step or sentence.
#[derive(Clone, Debug)]
pub struct HiddenStateDataset {
    pub vectors: Tensor,
    pub conditioning: Option<Tensor>,
    pub meta: HiddenMeta,
}

impl HiddenStateDataset {
    pub fn check(&self) -> Result<()> {
        let v = &self.vectors;
        if v.rank() != 2 || v.rows() != self.meta.count || v.cols() != self.meta.dim {
            return Err(CoreError::Format(format!(
                "vectors shape {:?} disagrees with metadata count {} dim {}",
                v.shape(),
                self.meta.count,
                self.meta.dim
            )));
        }
        match (&self.conditioning, self.meta.cond_dim) {
            (None, None) => Ok(()),
            (Some(c), Some(d)) if c.rank() == 2 && c.rows() == v.rows() && c.cols() == d => Ok(()),
            (c, d) => Err(CoreError::Format(format!(
                "conditioning shape {:?} disagrees with metadata cond_dim {d:?}",
                c.as_ref().map(|c| c.shape().to_vec())
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgmVariant {
    Gmvae,
    CgmvaeA,
    CgmvaeB,
}

impl DgmVariant {
    pub fn conditional(self) -> Conditional {
        match self {
            DgmVariant::Gmvae => Conditional::None,
            DgmVariant::CgmvaeA => Conditional::ModelA,
            DgmVariant::CgmvaeB => Conditional::ModelB,
        }
    }
}

impl fmt::Display for DgmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DgmVariant::Gmvae => "gmvae",
            DgmVariant::CgmvaeA => "cgmvae_a",
            DgmVariant::CgmvaeB => "cgmvae_b",
        })
    }
}

impl FromStr for DgmVariant {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmvae" => Ok(DgmVariant::Gmvae),
            "cgmvae_a" => Ok(DgmVariant::CgmvaeA),
            "cgmvae_b" => Ok(DgmVariant::CgmvaeB),
            _ => Err(CoreError::Site(format!("unknown dgm variant {s:?}"))),
        }
    }
}

/// A tap location plus the DGM family allowed there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpliceSite {
    pub location: Location,
    pub variant: DgmVariant,
}

impl SpliceSite {
    pub fn new(location: Location, variant: DgmVariant) -> Result<Self> {
        let conditional = variant != DgmVariant::Gmvae;
        let needs = location == Location::Seq2seqDecoderHidden;
        if conditional != needs {
            return Err(CoreError::Site(if needs {
                format!("{location} needs a conditional variant, got {variant}")
            } else {
                format!("{location} takes an unconditional gmvae, got {variant}")
            }));
        }
        Ok(Self { location, variant })
    }

    /// Site with the default variant for its location (`cgmvae_b` for the
    /// decoder hidden state).
    pub fn parse(site: &str) -> Result<Self> {
        let location: Location = site.parse()?;
        let variant = if location == Location::Seq2seqDecoderHidden {
            DgmVariant::CgmvaeB
        } else {
            DgmVariant::Gmvae
        };
        Self::new(location, variant)
    }

    pub fn host_kind(&self) -> HostKind {
        self.location.host_kind()
    }
}

impl fmt::Display for SpliceSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.location)
    }
}

/// What runs at the splice site.
#[derive(Clone, Debug)]
pub enum StochasticLayer {
    /// Passes vectors through unchanged.
    Identity,
    Dgm(Arc<GmvaeModel>),
    /// Inverted dropout, active only in training passes.
    Dropout(f32),
}

/// Routes the site's vectors through a [`StochasticLayer`]. The output
/// re-enters the graph as a constant, so nothing below the site receives
/// gradient through it.
pub struct SpliceHook {
    location: Location,
    layer: StochasticLayer,
    noise: NoiseMode,
    train: bool,
    rng: Rng,
    prev: Option<Tensor>,
}

impl SpliceHook {
    pub fn new(location: Location, layer: StochasticLayer, noise: NoiseMode, train: bool, rng: Rng) -> Self {
        Self {
            location,
            layer,
            noise,
            train,
            rng,
            prev: None,
        }
    }

    fn transform(&mut self, v: Tensor, step: usize) -> Result<Tensor> {
        match &self.layer {
            StochasticLayer::Identity => Ok(v),
            StochasticLayer::Dropout(rate) => {
                if !self.train || *rate == 0.0 {
                    return Ok(v);
                }
                let keep = 1.0 - rate;
                let mut v = v;
                for x in v.data_mut() {
                    *x = if self.rng.uniform_f32() < keep { *x / keep } else { 0.0 };
                }
                Ok(v)
            }
            StochasticLayer::Dgm(m) => {
                if m.config.needs_h() {
                    let cond = match (&self.prev, step) {
                        (Some(p), s) if s > 0 && p.shape() == v.shape() => p.clone(),
                        _ => Tensor::zeros(v.shape().to_vec()),
                    };
                    let out = m.reconstruct_batch(&v, Some(&cond), &mut self.rng, self.noise)?;
                    self.prev = Some(out.clone());
                    Ok(out)
                } else {
                    m.reconstruct_batch(&v, None, &mut self.rng, self.noise)
                }
            }
        }
    }
}

impl SiteHook for SpliceHook {
    fn visit(&mut self, g: &mut Graph, tap: &Tap<'_>, x: Var) -> Result<Var> {
        if tap.location != self.location {
            return Ok(x);
        }
        let v = g.value(x).clone();
        let out = self.transform(v, tap.step)?;
        Ok(g.constant(out))
    }
}

/// Records valid rows at one location, grouped by item in corpus order.
pub struct SnapshotHook {
    location: Location,
    limit: Option<usize>,
    pub items: BTreeMap<usize, Vec<Vec<f32>>>,
}

impl SnapshotHook {
    pub fn new(location: Location, limit: Option<usize>) -> Self {
        Self {
            location,
            limit,
            items: BTreeMap::new(),
        }
    }
}

impl SiteHook for SnapshotHook {
    fn visit(&mut self, g: &mut Graph, tap: &Tap<'_>, x: Var) -> Result<Var> {
        if tap.location == self.location {
            let t = g.value(x);
            for (r, &ok) in tap.valid.iter().enumerate() {
                let item = tap.first_item + r / tap.rows_per_item.max(1);
                if ok && self.limit.is_none_or(|l| item < l) {
                    self.items.entry(item).or_default().push(t.row(r).to_vec());
                }
            }
        }
        Ok(x)
    }
}

fn rows_tensor(rows: &[Vec<f32>], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend_from_slice(r);
    }
    Ok(Tensor::new(vec![rows.len(), dim], data)?)
}

/// Hidden vectors at `site` for the first `limit` items of `data`, padding
/// excluded. Conditional variants get consecutive-pair conditioning.
pub fn snapshot_hidden<H: Host>(
    host: &H,
    site: &SpliceSite,
    data: &H::Data,
    limit: Option<usize>,
    host_checkpoint_id: &str,
    corpus_id: &str,
) -> Result<HiddenStateDataset> {
    let dim = host.site_dim(site.location)?;
    let mut hook = SnapshotHook::new(site.location, limit);
    host.visit_all(data, &mut hook)?;
    let seqs: Vec<Vec<Vec<f32>>> = hook.items.into_values().collect();
    let (vectors, conditioning) = if site.variant == DgmVariant::Gmvae {
        let rows: Vec<Vec<f32>> = seqs.into_iter().flatten().collect();
        (rows_tensor(&rows, dim)?, None)
    } else {
        let pairs = cond_pair_dataset(&seqs);
        let xs: Vec<Vec<f32>> = pairs.iter().map(|p| p.x.clone()).collect();
        let hs: Vec<Vec<f32>> = pairs.into_iter().map(|p| p.h).collect();
        (rows_tensor(&xs, dim)?, Some(rows_tensor(&hs, dim)?))
    };
    let ds = HiddenStateDataset {
        meta: HiddenMeta {
            host_checkpoint_id: host_checkpoint_id.to_string(),
            site: site.location.to_string(),
            corpus_id: corpus_id.to_string(),
            count: vectors.rows(),
            dim,
            cond_dim: conditioning.as_ref().map(|_| dim),
        },
        vectors,
        conditioning,
    };
    ds.check()?;
    Ok(ds)
}

/// Host with a stochastic layer at one site and everything below frozen.
#[derive(Clone, Debug)]
pub struct SplicedHost<H: Host> {
    pub host: H,
    pub site: SpliceSite,
    pub layer: StochasticLayer,
    pub freeze_boundary: BTreeSet<String>,
    pub noise_mode: NoiseMode,
    /// Restore the epoch with the lowest validation loss after fine-tuning.
    pub select_best: bool,
    /// Seeds the per-batch noise of evaluation passes.
    pub eval_seed: u64,
}

/// Gradient instrumentation of one fine-tune backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FreezeAudit {
    /// Frozen parameters with a nonzero gradient under fine-tune binding.
    pub leaked: Vec<String>,
    /// Frozen parameters reached by gradient when every parameter is bound
    /// as trainable. `None` where the host has paths around the site.
    pub structural_leaks: Option<Vec<String>>,
    /// Trainable parameters that received a nonzero gradient.
    pub trainable_with_grad: usize,
}

impl FreezeAudit {
    pub fn is_clean(&self) -> bool {
        self.leaked.is_empty() && self.structural_leaks.as_ref().is_none_or(|s| s.is_empty())
    }
}

/// Per-epoch mean losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

/// Attaches `dgm` at `site`. The DGM's input width and conditioning must
/// match the site.
pub fn splice_layer<H: Host>(host: H, site: SpliceSite, dgm: GmvaeModel, noise_mode: NoiseMode) -> Result<SplicedHost<H>> {
    let dim = host.site_dim(site.location)?;
    let c = &dgm.config;
    if c.dim_x != dim {
        return Err(CoreError::Dimension(format!(
            "dgm dim_x {} does not match site {} width {dim}",
            c.dim_x, site.location
        )));
    }
    if c.conditional != site.variant.conditional() {
        return Err(CoreError::Site(format!(
            "site {} expects a {} model, got conditional={:?}",
            site.location, site.variant, c.conditional
        )));
    }
    if c.needs_h() && c.dim_h != dim {
        return Err(CoreError::Dimension(format!(
            "dgm dim_h {} does not match site {} width {dim}",
            c.dim_h, site.location
        )));
    }
    with_layer(host, site, StochasticLayer::Dgm(Arc::new(dgm)), noise_mode)
}

/// Attaches any [`StochasticLayer`] at `site`.
pub fn with_layer<H: Host>(
    mut host: H,
    site: SpliceSite,
    layer: StochasticLayer,
    noise_mode: NoiseMode,
) -> Result<SplicedHost<H>> {
    if let StochasticLayer::Dropout(r) = layer {
        if !(0.0..1.0).contains(&r) {
            return Err(CoreError::Config(format!("dropout rate {r} outside [0,1)")));
        }
    }
    let frozen: BTreeSet<String> = host.frozen_names(site.location)?.into_iter().collect();
    host.store_mut().set_trainable(|n| !frozen.contains(n));
    Ok(SplicedHost {
        host,
        site,
        layer,
        freeze_boundary: frozen,
        noise_mode,
        select_best: false,
        eval_seed: 0,
    })
}

impl<H: Host> SplicedHost<H> {
    pub fn hook(&self, train: bool, rng: Rng) -> SpliceHook {
        SpliceHook::new(self.site.location, self.layer.clone(), self.noise_mode, train, rng)
    }

    /// Evaluation hooks; batch `i` draws noise from `(seed, i)`.
    pub fn eval_hooks(&self, seed: u64) -> impl Fn(usize) -> Box<dyn SiteHook + Send> + Sync + '_ {
        move |i| Box::new(self.hook(false, Rng::derive(seed, i as u64))) as Box<dyn SiteHook + Send>
    }

    pub fn eval_loss(&self, data: &H::Data) -> Result<f64> {
        let hooks = self.eval_hooks(self.eval_seed);
        let f: &HookFactory<'_> = &hooks;
        self.host.eval_loss(data, f)
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.host.store().checksum_where(|n| self.freeze_boundary.contains(n))
    }

    /// Trains the parameters above the site for `epochs`, logging train and
    /// validation cross-entropy per epoch.
    pub fn finetune_above(
        &mut self,
        train: &H::Data,
        val: &H::Data,
        epochs: usize,
        opt: &mut OptimizerState,
        rng: &mut Rng,
        mut log: Option<&mut CurveLog>,
    ) -> Result<Curves> {
        let before = self.frozen_checksum();
        let mut curves = Curves::default();
        let mut best: Option<(f64, ParamStore)> = None;
        for epoch in 0..epochs {
            let mut hook = self.hook(true, rng.fork());
            let tl = self.host.train_epoch(train, &mut hook, opt, rng).map_err(|e| match e {
                CoreError::Divergence { term, batch, .. } => CoreError::Divergence { term, epoch, batch },
                e => e,
            })?;
            let vl = self.eval_loss(val)?;
            if !vl.is_finite() {
                return Err(CoreError::Divergence {
                    term: "val".into(),
                    epoch,
                    batch: 0,
                });
            }
            if let Some(l) = log.as_deref_mut() {
                l.append(epoch, Split::Train, Term::Ce, tl)?;
                l.append(epoch, Split::Val, Term::Ce, vl)?;
            }
            curves.train.push(tl);
            curves.val.push(vl);
            if self.select_best && best.as_ref().map_or(true, |b| vl < b.0) {
                best = Some((vl, self.host.store().clone()));
            }
        }
        if let Some((_, store)) = best {
            *self.host.store_mut() = store;
        }
        if self.frozen_checksum() != before {
            return Err(CoreError::Site(format!(
                "parameters below {} changed during fine-tuning",
                self.site.location
            )));
        }
        Ok(curves)
    }

    /// One training-mode backward on the first batch of `data`, checking
    /// which parameters receive gradient.
    pub fn freeze_audit(&self, data: &H::Data) -> Result<FreezeAudit> {
        let mut hook = self.hook(true, Rng::seed(self.eval_seed));
        let norms = self.host.grad_norms(data, &mut hook, false)?;
        let mut leaked: Vec<String> = norms
            .iter()
            .filter(|(n, &v)| self.freeze_boundary.contains(*n) && v != 0.0)
            .map(|(n, _)| n.clone())
            .collect();
        leaked.sort();
        let trainable_with_grad = norms
            .iter()
            .filter(|(n, &v)| !self.freeze_boundary.contains(*n) && v != 0.0)
            .count();
        let structural_leaks = if self.host.kind() == HostKind::Seq2seq {
            None
        } else {
            let mut hook = self.hook(true, Rng::seed(self.eval_seed));
            let all = self.host.grad_norms(data, &mut hook, true)?;
            let mut s: Vec<String> = all
                .into_iter()
                .filter(|(n, v)| self.freeze_boundary.contains(n) && *v != 0.0)
                .map(|(n, _)| n)
                .collect();
            s.sort();
            Some(s)
        };
        Ok(FreezeAudit {
            leaked,
            structural_leaks,
            trainable_with_grad,
        })
    }
}

/// Fine-tuning with inverted dropout at `site` instead of a DGM, same
/// freeze boundary.
#[allow(clippy::too_many_arguments)]
pub fn dropout_baseline<H: Host>(
    host: H,
    location: Location,
    rate: f32,
    train: &H::Data,
    val: &H::Data,
    epochs: usize,
    opt: &mut OptimizerState,
    rng: &mut Rng,
    log: Option<&mut CurveLog>,
) -> Result<(SplicedHost<H>, Curves)> {
    let site = SpliceSite {
        location,
        variant: DgmVariant::Gmvae,
    };
    let mut s = with_layer(host, site, StochasticLayer::Dropout(rate), NoiseMode::Mean)?;
    let curves = s.finetune_above(train, val, epochs, opt, rng, log)?;
    Ok((s, curves))
}

/// Deterministic train/validation split holding out `frac` of `n` items.
pub fn split_indices(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm = Rng::seed(seed).permutation(n);
    let k = ((n as f64) * frac).round() as usize;
    let val = perm.split_off(n - k.min(n));
    let mut train = perm;
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmvae::GmvaeConfig;
    use crate::hosts::mlp::{MlpClassifier, MlpData};
    use crate::hosts::seq2seq::{PairData, Seq2seq, Seq2seqConfig};
    use crate::hosts::transformer::{MlmData, TinyTransformer, TransformerConfig};

    fn tiny_transformer() -> TinyTransformer {
        let cfg = TransformerConfig {
            vocab: 20,
            hidden: 8,
            heads: 2,
            ffn: 16,
            layers: 2,
            max_len: 10,
            dropout: 0.0,
        };
        TinyTransformer::new(cfg, &mut Rng::seed(1)).unwrap()
    }

    fn dgm(dim: usize, cond: Conditional) -> GmvaeModel {
        let cfg = GmvaeConfig {
            dim_x: dim,
            dim_z: 3,
            dim_w: 2,
            k: 2,
            hidden_width: 8,
            depth: 1,
            sigma_dec: 0.1,
            dropout_rate: 0.0,
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 8,
            conditional: cond,
            dim_h: if cond == Conditional::None { 0 } else { dim },
            separate_prior_nets: false,
        };
        GmvaeModel::new(cfg, &mut Rng::seed(2)).unwrap()
    }

    #[test]
    fn variant_invariants() {
        assert!(SpliceSite::new(Location::Seq2seqDecoderHidden, DgmVariant::Gmvae).is_err());
        assert!(SpliceSite::new(Location::Seq2seqDecoderHidden, DgmVariant::CgmvaeA).is_ok());
        assert!(SpliceSite::new(Location::TransformerTop, DgmVariant::CgmvaeB).is_err());
        assert_eq!(SpliceSite::parse("seq2seq.decoder_hidden").unwrap().variant, DgmVariant::CgmvaeB);
        assert_eq!("cgmvae_a".parse::<DgmVariant>().unwrap(), DgmVariant::CgmvaeA);
    }

    #[test]
    fn token_snapshot_counts_real_tokens() {
        let m = tiny_transformer();
        let data = MlmData::new(vec![vec![5, 6, 7, 8], vec![9, 10, 11, 12], vec![13, 14, 15, 16]], 2, 0.15, 0).unwrap();
        let site = SpliceSite::parse("transformer.layer.1.post_attention").unwrap();
        let ds = snapshot_hidden(&m, &site, &data, None, "h", "c").unwrap();
        assert_eq!(ds.meta.count, 12);
        assert_eq!(ds.vectors.shape(), &[12, 8]);
        let ragged = MlmData::new(vec![vec![5, 6], vec![9, 10, 11, 12, 13]], 2, 0.15, 0).unwrap();
        let ds = snapshot_hidden(&m, &SpliceSite::parse("transformer.top").unwrap(), &ragged, None, "h", "c").unwrap();
        assert_eq!(ds.meta.count, 7);
        let ds = snapshot_hidden(&m, &SpliceSite::parse("transformer.top").unwrap(), &ragged, Some(1), "h", "c").unwrap();
        assert_eq!(ds.meta.count, 2);
    }

    #[test]
    fn seq2seq_snapshot_counts() {
        let cfg = Seq2seqConfig {
            vocab: 15,
            emb: 4,
            hidden: 6,
            max_len: 10,
        };
        let m = Seq2seq::new(cfg, &mut Rng::seed(3)).unwrap();
        let src: Vec<Vec<usize>> = (0..5).map(|i| vec![5 + i, 6, 7]).collect();
        let tgt: Vec<Vec<usize>> = (0..5).map(|i| vec![5 + i; i % 3 + 1]).collect();
        let data = PairData::new(src, tgt.clone(), 2).unwrap();
        let enc = snapshot_hidden(&m, &SpliceSite::parse("seq2seq.encoder_output").unwrap(), &data, None, "h", "c").unwrap();
        assert_eq!(enc.meta.count, 5);
        let steps: usize = tgt.iter().map(|t| t.len() + 1).sum();
        let ctx = snapshot_hidden(&m, &SpliceSite::parse("seq2seq.context").unwrap(), &data, None, "h", "c").unwrap();
        assert_eq!(ctx.meta.count, steps);
        let dec = snapshot_hidden(&m, &SpliceSite::parse("seq2seq.decoder_hidden").unwrap(), &data, None, "h", "c").unwrap();
        assert_eq!(dec.meta.count, steps - 5);
        assert_eq!(dec.conditioning.as_ref().unwrap().rows(), steps - 5);
    }

    #[test]
    fn splice_rejects_mismatches() {
        let m = tiny_transformer();
        let top = SpliceSite::parse("transformer.top").unwrap();
        assert!(splice_layer(m.clone(), top, dgm(7, Conditional::None), NoiseMode::Mean).is_err());
        assert!(splice_layer(m.clone(), top, dgm(8, Conditional::ModelB), NoiseMode::Mean).is_err());
        let s = splice_layer(m, top, dgm(8, Conditional::None), NoiseMode::Mean).unwrap();
        assert_eq!(s.freeze_boundary.len(), s.host.store.len() - 2);
        assert!(s.host.store.iter().all(|p| p.trainable == p.name.starts_with("head.")));
    }

    #[test]
    fn identity_and_mean_mode_are_deterministic() {
        let m = tiny_transformer();
        let batch = vec![vec![5, 2, 7, 8], vec![9, 10]];
        let base = m.logits(&batch, &mut crate::hosts::NoHook).unwrap();
        let site = SpliceSite::parse("transformer.layer.2.post_attention").unwrap();
        let id = with_layer(m.clone(), site, StochasticLayer::Identity, NoiseMode::Sample).unwrap();
        let out = id.host.logits(&batch, &mut id.hook(false, Rng::seed(5))).unwrap();
        assert!(base.bit_eq(&out));
        let s = splice_layer(m, site, dgm(8, Conditional::None), NoiseMode::Mean).unwrap();
        let a = s.host.logits(&batch, &mut s.hook(false, Rng::seed(5))).unwrap();
        let b = s.host.logits(&batch, &mut s.hook(false, Rng::seed(6))).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&base));
    }

    #[test]
    fn zero_epochs_and_zero_rate_dropout() {
        let mut rng = Rng::seed(9);
        let host = MlpClassifier::new(6, &[5, 4, 3], &mut rng).unwrap();
        let x = Tensor::new(vec![12, 6], rng.normal_vec(72)).unwrap();
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let data = MlpData::new(x, y, 4).unwrap();
        let site = SpliceSite::parse("mlp.after.1").unwrap();
        let mut s = with_layer(host.clone(), site, StochasticLayer::Identity, NoiseMode::Mean).unwrap();
        let c = s
            .finetune_above(&data, &data, 0, &mut OptimizerState::sgd(0.1), &mut Rng::seed(1), None)
            .unwrap();
        assert!(c.train.is_empty());
        assert_eq!(s.host.store.checksum(), host.store.checksum());

        let mut log = CurveLog::in_memory();
        let (d0, _) = dropout_baseline(
            host.clone(),
            site.location,
            0.0,
            &data,
            &data,
            3,
            &mut OptimizerState::sgd(0.1),
            &mut Rng::seed(4),
            Some(&mut log),
        )
        .unwrap();
        assert_eq!(log.series(Split::Train, Term::Ce).len(), 3);
        let mut plain = host.clone();
        plain.store.set_trainable(|n| !n.starts_with("l1."));
        let mut opt = OptimizerState::sgd(0.1);
        let mut r = Rng::seed(4);
        for _ in 0..3 {
            let _ = r.fork();
            plain.train_epoch(&data, &mut crate::hosts::NoHook, &mut opt, &mut r).unwrap();
        }
        assert_eq!(d0.host.store.checksum(), plain.store.checksum());
        assert!(dropout_baseline(host, site.location, 1.0, &data, &data, 1, &mut opt, &mut r, None).is_err());
    }

    #[test]
    fn split_is_fixed_by_seed() {
        let (a, b) = split_indices(100, 0.1, 3);
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(100, 0.1, 3), (a.clone(), b.clone()));
        assert_ne!(split_indices(100, 0.1, 4).1, b);
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
