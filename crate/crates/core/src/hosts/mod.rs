//! Host networks with addressable tap points.
//!
//! Each host calls a [`SiteHook`] at every tap it exposes. Taps always carry
//! a 2-D `[rows, dim]` var; the hook returns the var to continue with.

pub mod idx;
pub mod mlp;
pub mod seq2seq;
pub mod transformer;

use crate::error::{CoreError, Result};
use dgmr_tensor::{Graph, OptimizerState, ParamStore, Rng, Var};
use std::collections::HashMap;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HostKind {
    Mlp,
    Transformer,
    Seq2seq,
}

impl fmt::Display for HostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HostKind::Mlp => "mlp",
            HostKind::Transformer => "transformer",
            HostKind::Seq2seq => "seq2seq",
        })
    }
}

/// Tap locations. Layer indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Location {
    MlpAfter(usize),
    TransformerTop,
    TransformerPostAttention(usize),
    Seq2seqEncoderOutput,
    Seq2seqDecoderHidden,
    Seq2seqContext,
}

impl Location {
    pub fn host_kind(self) -> HostKind {
        match self {
            Location::MlpAfter(_) => HostKind::Mlp,
            Location::TransformerTop | Location::TransformerPostAttention(_) => HostKind::Transformer,
            _ => HostKind::Seq2seq,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::MlpAfter(i) => write!(f, "mlp.after.{i}"),
            Location::TransformerTop => write!(f, "transformer.top"),
            Location::TransformerPostAttention(l) => write!(f, "transformer.layer.{l}.post_attention"),
            Location::Seq2seqEncoderOutput => write!(f, "seq2seq.encoder_output"),
            Location::Seq2seqDecoderHidden => write!(f, "seq2seq.decoder_hidden"),
            Location::Seq2seqContext => write!(f, "seq2seq.context"),
        }
    }
}

impl std::str::FromStr for Location {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let idx = |p: &str| -> Result<usize> {
            match p.parse::<usize>() {
                Ok(i) if i >= 1 => Ok(i),
                _ => Err(CoreError::Site(format!("bad layer index {p:?} in site {s:?}"))),
            }
        };
        Ok(match parts.as_slice() {
            ["mlp", "after", i] => Location::MlpAfter(idx(i)?),
            ["transformer", "top"] => Location::TransformerTop,
            ["transformer", "layer", l, "post_attention"] => Location::TransformerPostAttention(idx(l)?),
            ["seq2seq", "encoder_output"] => Location::Seq2seqEncoderOutput,
            ["seq2seq", "decoder_hidden"] => Location::Seq2seqDecoderHidden,
            ["seq2seq", "context"] => Location::Seq2seqContext,
            _ => return Err(CoreError::Site(format!("unknown site {s:?}"))),
        })
    }
}

/// One visit of a tap point.
#[derive(Clone, Copy, Debug)]
pub struct Tap<'a> {
    pub location: Location,
    /// Decoder step for per-step seq2seq taps, 0 elsewhere.
    pub step: usize,
    /// Per-row flag, false for padding rows.
    pub valid: &'a [bool],
    /// Global index of the first row's sentence or sample, for
    /// snapshotting in corpus order.
    pub first_item: usize,
    /// Rows per item for token-level taps (`T` for `[B*T, D]`), else 1.
    pub rows_per_item: usize,
}

pub trait SiteHook {
    fn visit(&mut self, g: &mut Graph, tap: &Tap<'_>, x: Var) -> Result<Var>;
}

/// Leaves every tap untouched.
pub struct NoHook;

impl SiteHook for NoHook {
    fn visit(&mut self, _g: &mut Graph, _tap: &Tap<'_>, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Builds a fresh hook for the `i`-th evaluation batch.
pub type HookFactory<'a> = dyn Fn(usize) -> Box<dyn SiteHook + Send> + Sync + 'a;

pub fn no_hooks(_: usize) -> Box<dyn SiteHook + Send> {
    Box::new(NoHook)
}

/// Common surface used by snapshotting, splicing and fine-tuning.
pub trait Host: Clone + Send + Sync {
    type Data: Sync;

    fn kind(&self) -> HostKind;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Vector width at a tap.
    fn site_dim(&self, loc: Location) -> Result<usize>;

    /// Parameters whose outputs feed the tap.
    fn frozen_names(&self, loc: Location) -> Result<Vec<String>>;

    /// One pass over `data` updating trainable parameters; returns the mean
    /// training loss.
    fn train_epoch(
        &mut self,
        data: &Self::Data,
        hook: &mut dyn SiteHook,
        opt: &mut OptimizerState,
        rng: &mut Rng,
    ) -> Result<f64>;

    /// Mean loss in evaluation mode, batches built with `hooks(batch)`.
    fn eval_loss(&self, data: &Self::Data, hooks: &HookFactory<'_>) -> Result<f64>;

    /// Evaluation-mode forward over all of `data`, for hooks that record.
    fn visit_all(&self, data: &Self::Data, hook: &mut dyn SiteHook) -> Result<()>;

    /// Gradient L2 norms after one backward pass on the first batch of
    /// `data`. With `bind_all` every parameter requires grad; otherwise the
    /// trainable flags decide.
    fn grad_norms(&self, data: &Self::Data, hook: &mut dyn SiteHook, bind_all: bool) -> Result<HashMap<String, f64>>;
}

pub(crate) fn check_kind(loc: Location, kind: HostKind) -> Result<()> {
    if loc.host_kind() != kind {
        return Err(CoreError::Site(format!("site {loc} does not belong to a {kind} host")));
    }
    Ok(())
}

pub(crate) fn norms_from(store: &ParamStore, bound: &dgmr_tensor::Bound, grads: &dgmr_tensor::Gradients) -> HashMap<String, f64> {
    store
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| {
            let n = grads
                .get(v)
                .map_or(0.0, |g| g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt());
            (p.name.clone(), n)
        })
        .collect()
}

/// Mean of per-batch `(loss_sum, count)` pairs.
pub(crate) fn pooled(parts: &[(f64, usize)]) -> f64 {
    let (s, n) = parts.iter().fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_strings_round_trip() {
        for s in [
            "mlp.after.1",
            "transformer.top",
            "transformer.layer.3.post_attention",
            "seq2seq.encoder_output",
            "seq2seq.decoder_hidden",
            "seq2seq.context",
        ] {
            let l: Location = s.parse().unwrap();
            assert_eq!(l.to_string(), s);
        }
        assert!("mlp.after.0".parse::<Location>().is_err());
        assert!("transformer.layer.x.post_attention".parse::<Location>().is_err());
        assert!("bert.top".parse::<Location>().is_err());
    }
}

/// Any host, tagged by kind, for checkpoints.
#[derive(Clone, Debug)]
pub enum AnyHost {
    Mlp(mlp::MlpClassifier),
    Transformer(transformer::TinyTransformer),
    Seq2seq(seq2seq::Seq2seq),
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum HostHeader {
    Mlp { input_dim: usize, sizes: Vec<usize> },
    Transformer { config: transformer::TransformerConfig },
    Seq2seq { config: seq2seq::Seq2seqConfig },
}

const HOST_ENTRY: &str = "__host__";

impl AnyHost {
    pub fn kind(&self) -> HostKind {
        match self {
            AnyHost::Mlp(_) => HostKind::Mlp,
            AnyHost::Transformer(_) => HostKind::Transformer,
            AnyHost::Seq2seq(_) => HostKind::Seq2seq,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AnyHost::Mlp(m) => &m.store,
            AnyHost::Transformer(m) => &m.store,
            AnyHost::Seq2seq(m) => &m.store,
        }
    }

    pub fn to_entries(&self) -> Result<crate::artifact_store::Entries> {
        let header = match self {
            AnyHost::Mlp(m) => HostHeader::Mlp {
                input_dim: m.input_dim,
                sizes: m.layers.iter().map(|l| l.fan_out).collect(),
            },
            AnyHost::Transformer(m) => HostHeader::Transformer {
                config: m.config.clone(),
            },
            AnyHost::Seq2seq(m) => HostHeader::Seq2seq {
                config: m.config.clone(),
            },
        };
        let json = serde_json::to_string(&header).map_err(|e| CoreError::Format(e.to_string()))?;
        let mut e = vec![crate::artifact_store::text_entry(HOST_ENTRY, &json)];
        e.extend(crate::artifact_store::store_entries(self.store()));
        Ok(e)
    }

    pub fn from_entries(entries: &[(String, dgmr_tensor::Tensor)]) -> Result<Self> {
        let t = crate::artifact_store::find(entries, HOST_ENTRY)
            .ok_or_else(|| CoreError::Format(format!("checkpoint has no {HOST_ENTRY} entry")))?;
        let header: HostHeader = serde_json::from_str(&crate::artifact_store::entry_text(t)?)
            .map_err(|e| CoreError::Format(format!("{HOST_ENTRY}: {e}")))?;
        let rng = &mut Rng::seed(0);
        let mut host = match header {
            HostHeader::Mlp { input_dim, sizes } => AnyHost::Mlp(mlp::MlpClassifier::new(input_dim, &sizes, rng)?),
            HostHeader::Transformer { config } => {
                AnyHost::Transformer(transformer::TinyTransformer::new(config, rng)?)
            }
            HostHeader::Seq2seq { config } => AnyHost::Seq2seq(seq2seq::Seq2seq::new(config, rng)?),
        };
        let store = match &mut host {
            AnyHost::Mlp(m) => &mut m.store,
            AnyHost::Transformer(m) => &mut m.store,
            AnyHost::Seq2seq(m) => &mut m.store,
        };
        crate::artifact_store::restore_store(store, entries)?;
        Ok(host)
    }
}
