//! Post-LN transformer encoder trained as a masked language model.

use super::{check_kind, norms_from, pooled, HookFactory, Host, HostKind, Location, SiteHook, Tap};
use crate::error::{CoreError, Result};
use crate::par;
use crate::textdata::{MASK, NUM_RESERVED, PAD};
use dgmr_tensor::nn::{Embedding, LayerNorm, Linear};
use dgmr_tensor::{Bound, Graph, OptimizerState, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const NEG_INF: f32 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_ffn")]
    pub ffn: usize,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f32,
}

fn d_hidden() -> usize {
    128
}
fn d_heads() -> usize {
    4
}
fn d_ffn() -> usize {
    512
}
fn d_layers() -> usize {
    4
}
fn d_max_len() -> usize {
    64
}
fn d_dropout() -> f32 {
    0.1
}

impl TransformerConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            hidden: d_hidden(),
            heads: d_heads(),
            ffn: d_ffn(),
            layers: d_layers(),
            max_len: d_max_len(),
            dropout: d_dropout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= NUM_RESERVED {
            return Err(CoreError::Config(format!("vocab of {} has no ordinary tokens", self.vocab)));
        }
        if self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.layers == 0 || self.max_len == 0 {
            return Err(CoreError::Config("transformer dims must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TinyTransformer {
    pub config: TransformerConfig,
    pub store: ParamStore,
    tok: Embedding,
    pos: Embedding,
    layers: Vec<EncoderLayer>,
    head: Linear,
}

/// Sentences for MLM training and evaluation. Evaluation masks are drawn
/// from `eval_seed` so every evaluation sees the same targets.
#[derive(Clone, Debug)]
pub struct MlmData {
    pub sentences: Vec<Vec<usize>>,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub eval_seed: u64,
}

impl MlmData {
    pub fn new(sentences: Vec<Vec<usize>>, batch_size: usize, mask_prob: f64, eval_seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&mask_prob) {
            return Err(CoreError::Config(format!("mask_prob {mask_prob} outside [0,1]")));
        }
        Ok(Self {
            sentences,
            batch_size,
            mask_prob,
            eval_seed,
        })
    }
}

/// MLM corruption: each ordinary token is chosen with probability `prob`
/// (at least one per non-empty sentence); chosen tokens become MASK with
/// probability 0.8, a random token with 0.1, else stay.
pub fn mlm_corrupt(ids: &[usize], prob: f64, vocab: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let cand: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] >= NUM_RESERVED).collect();
    let mut pos: Vec<usize> = cand.iter().copied().filter(|_| rng.uniform() < prob).collect();
    if pos.is_empty() && !cand.is_empty() {
        pos.push(cand[rng.below(cand.len())]);
    }
    let mut out = ids.to_vec();
    for &p in &pos {
        let u = rng.uniform();
        if u < 0.8 {
            out[p] = MASK;
        } else if u < 0.9 {
            out[p] = NUM_RESERVED + rng.below(vocab - NUM_RESERVED);
        }
    }
    (out, pos)
}

/// Top-k ids and predictive entropy (nats) at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub topk: Vec<usize>,
    pub entropy: f64,
}

struct Padded {
    ids: Vec<usize>,
    valid: Vec<bool>,
    lens: Vec<usize>,
    t: usize,
}

impl TinyTransformer {
    pub fn new(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.hidden, config.ffn);
        let mut store = ParamStore::new();
        let tok = Embedding::new(&mut store, "emb.tok", config.vocab, d, rng);
        let pos = Embedding::new(&mut store, "emb.pos", config.max_len, d, rng);
        let layers = (1..=config.layers)
            .map(|l| {
                let n = |s: &str| format!("layer{l}.{s}");
                EncoderLayer {
                    q: Linear::new(&mut store, &n("attn.q"), d, d, rng),
                    k: Linear::new(&mut store, &n("attn.k"), d, d, rng),
                    v: Linear::new(&mut store, &n("attn.v"), d, d, rng),
                    o: Linear::new(&mut store, &n("attn.o"), d, d, rng),
                    ln1: LayerNorm::new(&mut store, &n("ln1"), d),
                    ffn_in: Linear::new(&mut store, &n("ffn.in"), d, f, rng),
                    ffn_out: Linear::new(&mut store, &n("ffn.out"), f, d, rng),
                    ln2: LayerNorm::new(&mut store, &n("ln2"), d),
                }
            })
            .collect();
        let head = Linear::new(&mut store, "head", d, config.vocab, rng);
        Ok(Self {
            config,
            store,
            tok,
            pos,
            layers,
            head,
        })
    }

    fn pad(&self, batch: &[Vec<usize>]) -> Result<Padded> {
        let t = batch.iter().map(Vec::len).max().unwrap_or(0).max(1);
        if t > self.config.max_len {
            return Err(CoreError::Dimension(format!(
                "sequence of length {t} exceeds max length {}",
                self.config.max_len
            )));
        }
        let mut ids = vec![PAD; batch.len() * t];
        let mut valid = vec![false; batch.len() * t];
        for (b, s) in batch.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&i| i >= self.config.vocab) {
                return Err(CoreError::Domain(format!("token id {bad} outside vocab")));
            }
            ids[b * t..b * t + s.len()].copy_from_slice(s);
            valid[b * t..b * t + s.len()].fill(true);
        }
        Ok(Padded {
            ids,
            valid,
            lens: batch.iter().map(Vec::len).collect(),
            t,
        })
    }

    /// Multi-head self-attention of layer `l` (0-based) over `x [B,T,D]`.
    /// Returns the projected output and the weights `[B*H, T, T]`.
    pub fn attention(&self, g: &mut Graph, p: &Bound, l: usize, x: Var, lens: &[usize]) -> Result<(Var, Var)> {
        let layer = &self.layers[l];
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let (d, h) = (self.config.hidden, self.config.heads);
        let dh = d / h;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, t, h, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            Ok(g.reshape(v, &[b * h, t, dh])?)
        };
        let q = layer.q.forward(g, p, x)?;
        let q = split(g, q)?;
        let k = layer.k.forward(g, p, x)?;
        let k = split(g, k)?;
        let v = layer.v.forward(g, p, x)?;
        let v = split(g, v)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let mut bias = vec![0f32; b * h * t * t];
        for (bi, &len) in lens.iter().enumerate() {
            for hi in 0..h {
                for i in 0..t {
                    let row = ((bi * h + hi) * t + i) * t;
                    bias[row + len..row + t].fill(NEG_INF);
                }
            }
        }
        let bias = g.constant(Tensor::new(vec![b * h, t, t], bias)?);
        let scores = g.add(scores, bias)?;
        let w = g.softmax(scores)?;
        let ctx = g.bmm(w, v, false)?;
        let ctx = g.reshape(ctx, &[b, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        Ok((layer.o.forward(g, p, ctx)?, w))
    }

    fn tap(
        g: &mut Graph,
        hook: &mut dyn SiteHook,
        x: Var,
        location: Location,
        pad: &Padded,
        first_item: usize,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let flat = g.reshape(x, &[shape[0] * shape[1], shape[2]])?;
        let tap = Tap {
            location,
            step: 0,
            valid: &pad.valid,
            first_item,
            rows_per_item: pad.t,
        };
        let out = hook.visit(g, &tap, flat)?;
        if g.shape(out) != [shape[0] * shape[1], shape[2]] {
            return Err(CoreError::Dimension(format!("hook at {location} changed the tap shape")));
        }
        Ok(g.reshape(out, &shape)?)
    }

    /// Final hidden states `[B*T, D]` for a padded batch.
    fn hidden(
        &self,
        g: &mut Graph,
        p: &Bound,
        pad: &Padded,
        batch: usize,
        hook: &mut dyn SiteHook,
        mut drop: Option<&mut Rng>,
        first_item: usize,
    ) -> Result<Var> {
        let t = pad.t;
        let rate = self.config.dropout;
        let mut dropout = |g: &mut Graph, x: Var| -> Result<Var> {
            match drop.as_deref_mut() {
                Some(r) if rate > 0.0 => Ok(g.dropout(x, rate, r)?),
                _ => Ok(x),
            }
        };
        let tok = self.tok.forward(g, p, &pad.ids, &[batch, t])?;
        let pos_ids: Vec<usize> = (0..t).collect();
        let pos = self.pos.forward(g, p, &pos_ids, &[t])?;
        let x = g.add(tok, pos)?;
        let mut x = dropout(g, x)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let (a, _) = self.attention(g, p, l, x, &pad.lens)?;
            let a = dropout(g, a)?;
            let r = g.add(x, a)?;
            let r = Self::tap(g, hook, r, Location::TransformerPostAttention(l + 1), pad, first_item)?;
            let x1 = layer.ln1.forward(g, p, r)?;
            let f = layer.ffn_in.forward(g, p, x1)?;
            let f = g.relu(f)?;
            let f = layer.ffn_out.forward(g, p, f)?;
            let f = dropout(g, f)?;
            let s = g.add(x1, f)?;
            x = layer.ln2.forward(g, p, s)?;
        }
        let x = Self::tap(g, hook, x, Location::TransformerTop, pad, first_item)?;
        Ok(g.reshape(x, &[batch * t, self.config.hidden])?)
    }

    /// Vocabulary logits at every position, `[B*T, V]`, padded to the
    /// batch max length.
    pub fn logits(&self, batch: &[Vec<usize>], hook: &mut dyn SiteHook) -> Result<Tensor> {
        let pad = self.pad(batch)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let h = self.hidden(&mut g, &p, &pad, batch.len(), hook, None, 0)?;
        let out = self.head.forward(&mut g, &p, h)?;
        Ok(g.value(out).clone())
    }

    /// Attention weights of layer `l` (0-based) on the embedded batch.
    pub fn attention_weights(&self, batch: &[Vec<usize>], l: usize) -> Result<Tensor> {
        if l >= self.layers.len() {
            return Err(CoreError::Site(format!("no encoder layer {}", l + 1)));
        }
        let pad = self.pad(batch)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let mut x = self.tok.forward(&mut g, &p, &pad.ids, &[batch.len(), pad.t])?;
        let pos_ids: Vec<usize> = (0..pad.t).collect();
        let pos = self.pos.forward(&mut g, &p, &pos_ids, &[pad.t])?;
        x = g.add(x, pos)?;
        let (_, w) = self.attention(&mut g, &p, l, x, &pad.lens)?;
        Ok(g.value(w).clone())
    }

    /// Mean cross-entropy at `targets` (per-sentence positions into the
    /// originals) given corrupted `inputs`. Zero when nothing is masked.
    #[allow(clippy::too_many_arguments)]
    fn mlm_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &[Vec<usize>],
        originals: &[Vec<usize>],
        targets: &[Vec<usize>],
        hook: &mut dyn SiteHook,
        drop: Option<&mut Rng>,
        first_item: usize,
    ) -> Result<(Var, usize)> {
        let pad = self.pad(inputs)?;
        let h = self.hidden(g, p, &pad, inputs.len(), hook, drop, first_item)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (b, pos) in targets.iter().enumerate() {
            for &i in pos {
                rows.push(b * pad.t + i);
                labels.push(originals[b][i]);
            }
        }
        if rows.is_empty() {
            let z = g.constant(Tensor::scalar(0.0));
            return Ok((z, 0));
        }
        let sel = g.index_rows(h, &rows)?;
        let logits = self.head.forward(g, p, sel)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.pick_last(lp, &labels)?;
        let m = g.mean(picked)?;
        Ok((g.neg(m)?, rows.len()))
    }

    fn eval_batch(data: &MlmData, start: usize, vocab: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let end = (start + data.batch_size).min(data.sentences.len());
        (start..end)
            .map(|i| {
                let mut r = Rng::derive(data.eval_seed, i as u64);
                mlm_corrupt(&data.sentences[i], data.mask_prob, vocab, &mut r)
            })
            .unzip()
    }

    /// Top-k predictions and entropy at the given positions of each input.
    /// Reserved ids are never predicted.
    pub fn predict(
        &self,
        inputs: &[Vec<usize>],
        positions: &[Vec<usize>],
        topk: usize,
        batch_size: usize,
        hooks: &HookFactory<'_>,
    ) -> Result<Vec<Vec<Prediction>>> {
        if inputs.len() != positions.len() {
            return Err(CoreError::Dimension(format!(
                "{} inputs but {} position lists",
                inputs.len(),
                positions.len()
            )));
        }
        if topk == 0 || topk > self.config.vocab - NUM_RESERVED {
            return Err(CoreError::Config(format!("topk {topk} outside 1..vocab")));
        }
        let starts: Vec<usize> = (0..inputs.len()).step_by(batch_size.max(1)).collect();
        let parts = par::map_indexed(&starts, |bi, &s| {
            let end = (s + batch_size.max(1)).min(inputs.len());
            let batch = &inputs[s..end];
            let pad = self.pad(batch)?;
            let mut rows = Vec::new();
            for (b, pos) in positions[s..end].iter().enumerate() {
                for &i in pos {
                    if i >= batch[b].len() {
                        return Err(CoreError::Dimension(format!("position {i} beyond sentence {}", s + b)));
                    }
                    rows.push(b * pad.t + i);
                }
            }
            let mut hook = hooks(bi);
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let h = self.hidden(&mut g, &p, &pad, batch.len(), hook.as_mut(), None, s)?;
            let mut out: Vec<Vec<Prediction>> = vec![Vec::new(); batch.len()];
            if rows.is_empty() {
                return Ok(out);
            }
            let sel = g.index_rows(h, &rows)?;
            let logits = self.head.forward(&mut g, &p, sel)?;
            let lp = g.log_softmax(logits)?;
            let lp = g.value(lp);
            let mut r = 0;
            for (b, pos) in positions[s..end].iter().enumerate() {
                for _ in pos {
                    out[b].push(rank(lp.row(r), topk));
                    r += 1;
                }
            }
            Ok(out)
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Inputs with every listed position replaced by the argmax prediction.
    pub fn impute(
        &self,
        inputs: &[Vec<usize>],
        positions: &[Vec<usize>],
        batch_size: usize,
        hooks: &HookFactory<'_>,
    ) -> Result<Vec<Vec<usize>>> {
        let preds = self.predict(inputs, positions, 1, batch_size, hooks)?;
        Ok(inputs
            .iter()
            .zip(positions)
            .zip(preds)
            .map(|((s, pos), pr)| {
                let mut s = s.clone();
                for (&i, p) in pos.iter().zip(pr) {
                    s[i] = p.topk[0];
                }
                s
            })
            .collect())
    }
}

fn rank(logp: &[f32], k: usize) -> Prediction {
    let entropy = -logp
        .iter()
        .map(|&l| {
            let l = l as f64;
            if l.is_finite() {
                l.exp() * l
            } else {
                0.0
            }
        })
        .sum::<f64>();
    let mut ids: Vec<usize> = (NUM_RESERVED..logp.len()).collect();
    ids.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    ids.truncate(k);
    Prediction { topk: ids, entropy }
}

impl Host for TinyTransformer {
    type Data = MlmData;

    fn kind(&self) -> HostKind {
        HostKind::Transformer
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn site_dim(&self, loc: Location) -> Result<usize> {
        check_kind(loc, HostKind::Transformer)?;
        match loc {
            Location::TransformerPostAttention(l) if l > self.layers.len() => Err(CoreError::Site(format!(
                "layer {l} beyond {} encoder layers",
                self.layers.len()
            ))),
            _ => Ok(self.config.hidden),
        }
    }

    fn frozen_names(&self, loc: Location) -> Result<Vec<String>> {
        self.site_dim(loc)?;
        let below = |name: &str| match loc {
            Location::TransformerTop => !name.starts_with("head."),
            Location::TransformerPostAttention(l) => {
                name.starts_with("emb.")
                    || name.starts_with(&format!("layer{l}.attn."))
                    || (1..l).any(|j| name.starts_with(&format!("layer{j}.")))
            }
            _ => false,
        };
        Ok(self.store.names().filter(|n| below(n)).map(str::to_string).collect())
    }

    fn train_epoch(
        &mut self,
        data: &MlmData,
        hook: &mut dyn SiteHook,
        opt: &mut OptimizerState,
        rng: &mut Rng,
    ) -> Result<f64> {
        let order = rng.permutation(data.sentences.len());
        let mut parts = Vec::new();
        for (bi, idx) in order.chunks(data.batch_size).enumerate() {
            let originals: Vec<Vec<usize>> = idx.iter().map(|&i| data.sentences[i].clone()).collect();
            let (inputs, targets): (Vec<_>, Vec<_>) = originals
                .iter()
                .map(|s| mlm_corrupt(s, data.mask_prob, self.config.vocab, rng))
                .unzip();
            let mut drop = rng.fork();
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let (loss, n) = self.mlm_loss(&mut g, &p, &inputs, &originals, &targets, hook, Some(&mut drop), 0)?;
            if n == 0 {
                continue;
            }
            let l = g.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(CoreError::Divergence {
                    term: "mlm".into(),
                    epoch: 0,
                    batch: bi,
                });
            }
            let grads = g.backward(loss)?;
            self.store.accumulate(&p, &grads);
            opt.step(&mut self.store)?;
            parts.push((l * n as f64, n));
        }
        Ok(pooled(&parts))
    }

    fn eval_loss(&self, data: &MlmData, hooks: &HookFactory<'_>) -> Result<f64> {
        let starts: Vec<usize> = (0..data.sentences.len()).step_by(data.batch_size).collect();
        let parts = par::map_indexed(&starts, |bi, &s| {
            let (inputs, targets) = Self::eval_batch(data, s, self.config.vocab);
            let originals = &data.sentences[s..s + inputs.len()];
            let mut hook = hooks(bi);
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let (loss, n) = self.mlm_loss(&mut g, &p, &inputs, originals, &targets, hook.as_mut(), None, s)?;
            Ok((g.value(loss).item() as f64 * n as f64, n))
        })?;
        Ok(pooled(&parts))
    }

    fn visit_all(&self, data: &MlmData, hook: &mut dyn SiteHook) -> Result<()> {
        for s in (0..data.sentences.len()).step_by(data.batch_size) {
            let batch = &data.sentences[s..(s + data.batch_size).min(data.sentences.len())];
            let pad = self.pad(batch)?;
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            self.hidden(&mut g, &p, &pad, batch.len(), hook, None, s)?;
        }
        Ok(())
    }

    fn grad_norms(&self, data: &MlmData, hook: &mut dyn SiteHook, bind_all: bool) -> Result<HashMap<String, f64>> {
        let (inputs, targets) = Self::eval_batch(data, 0, self.config.vocab);
        let mut g = Graph::new();
        let p = if bind_all {
            self.store.bind_with(&mut g, |_| true)
        } else {
            self.store.bind(&mut g)
        };
        let originals = &data.sentences[..inputs.len()];
        let (loss, _) = self.mlm_loss(&mut g, &p, &inputs, originals, &targets, hook, None, 0)?;
        let grads = g.backward(loss)?;
        Ok(norms_from(&self.store, &p, &grads))
    }
}

#[cfg(test)]
mod tests {
    use super::super::no_hooks;
    use super::*;

    fn small(vocab: usize, layers: usize, heads: usize) -> TinyTransformer {
        let cfg = TransformerConfig {
            vocab,
            hidden: 8,
            heads,
            ffn: 16,
            layers,
            max_len: 12,
            dropout: 0.0,
        };
        TinyTransformer::new(cfg, &mut Rng::seed(7)).unwrap()
    }

    #[test]
    fn attention_rows_sum_to_one_and_skip_padding() {
        let m = small(20, 1, 2);
        let w = m.attention_weights(&[vec![5, 6, 7, 8], vec![9, 10]], 0).unwrap();
        let t = 4;
        for (r, row) in w.data().chunks(t).enumerate() {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            let b = r / (2 * t);
            if b == 1 {
                assert_eq!(row[2], 0.0);
                assert_eq!(row[3], 0.0);
            }
        }
    }

    #[test]
    fn identity_value_attention_matches_hand_rolled() {
        let mut m = small(12, 1, 1);
        let d = 8;
        let mut eye = vec![0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let eye = Tensor::new(vec![d, d], eye).unwrap();
        m.store.set("layer1.attn.v.w", eye.clone()).unwrap();
        m.store.set("layer1.attn.o.w", eye).unwrap();
        let ids = vec![5usize, 7, 9];
        let mut g = Graph::new();
        let p = m.store.bind_frozen(&mut g);
        let x = m.tok.forward(&mut g, &p, &ids, &[1, 3]).unwrap();
        let (out, _) = m.attention(&mut g, &p, 0, x, &[3]).unwrap();
        let got = g.value(out).to_vec();

        let table = m.store.by_name("emb.tok.table").unwrap();
        let e: Vec<Vec<f64>> = ids.iter().map(|&i| table.row(i).iter().map(|&v| v as f64).collect()).collect();
        let proj = |name: &str, v: &[f64]| -> Vec<f64> {
            let w = m.store.by_name(&format!("{name}.w")).unwrap();
            let b = m.store.by_name(&format!("{name}.b")).unwrap();
            (0..d)
                .map(|j| b.data()[j] as f64 + (0..d).map(|i| v[i] * w.data()[i * d + j] as f64).sum::<f64>())
                .collect()
        };
        let q: Vec<Vec<f64>> = e.iter().map(|v| proj("layer1.attn.q", v)).collect();
        let k: Vec<Vec<f64>> = e.iter().map(|v| proj("layer1.attn.k", v)).collect();
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..d {
                let want: f64 = (0..3).map(|j| (s[j] - mx).exp() / z * e[j][c]).sum();
                assert!((got[i * d + c] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn padding_contents_do_not_leak() {
        let m = small(20, 2, 2);
        let mut hook = super::super::NoHook;
        let a = m.logits(&[vec![5, 6, 7, 8, 9], vec![10, 11, 12]], &mut hook).unwrap();
        let b = m.logits(&[vec![5, 6, 7, 8, 9], vec![10, 11, 12]], &mut hook).unwrap();
        assert!(a.bit_eq(&b));
        let pad = m.pad(&[vec![5, 6, 7, 8, 9], vec![10, 11, 12]]).unwrap();
        let mut ids = pad.ids.clone();
        ids[8] = 13;
        ids[9] = 14;
        let mut g = Graph::new();
        let p = m.store.bind_frozen(&mut g);
        let swapped = Padded { ids, ..pad };
        let h = m.hidden(&mut g, &p, &swapped, 2, &mut hook, None, 0).unwrap();
        let out = m.head.forward(&mut g, &p, h).unwrap();
        let c = g.value(out);
        let v = 20;
        for r in [0, 1, 2, 3, 4, 5, 6, 7] {
            assert_eq!(&a.data()[r * v..(r + 1) * v], &c.data()[r * v..(r + 1) * v]);
        }
    }

    #[test]
    fn too_long_is_rejected_and_topk_distinct() {
        let m = small(30, 1, 2);
        assert!(m.logits(&[vec![5; 13]], &mut super::super::NoHook).is_err());
        let preds = m.predict(&[vec![5, MASK, 7]], &[vec![1]], 5, 4, &no_hooks).unwrap();
        let mut k = preds[0][0].topk.clone();
        assert_eq!(k.len(), 5);
        k.sort();
        k.dedup();
        assert_eq!(k.len(), 5);
        assert!(k.iter().all(|&i| i >= NUM_RESERVED));
        let same = m.impute(&[vec![5, 6, 7]], &[vec![]], 4, &no_hooks).unwrap();
        assert_eq!(same, vec![vec![5, 6, 7]]);
    }

    #[test]
    fn frozen_names_by_site() {
        let m = small(20, 2, 2);
        let deep = m.frozen_names(Location::TransformerPostAttention(2)).unwrap();
        assert!(deep.iter().any(|n| n == "layer1.ffn.in.w"));
        assert!(deep.iter().any(|n| n == "layer2.attn.q.w"));
        assert!(!deep.iter().any(|n| n.starts_with("layer2.ln1") || n.starts_with("layer2.ffn")));
        let top = m.frozen_names(Location::TransformerTop).unwrap();
        assert_eq!(top.len(), m.store.len() - 2);
        assert!(m.frozen_names(Location::TransformerPostAttention(3)).is_err());
    }
}
