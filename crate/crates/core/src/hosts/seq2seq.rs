//! GRU encoder-decoder with bilinear global attention.

use super::{check_kind, norms_from, pooled, HookFactory, Host, HostKind, Location, SiteHook, Tap};
use crate::error::{CoreError, Result};
use crate::par;
use crate::textdata::{BOS, EOS, NUM_RESERVED, PAD};
use dgmr_tensor::nn::{Embedding, Linear};
use dgmr_tensor::{Bound, Graph, OptimizerState, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const NEG_INF: f32 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seq2seqConfig {
    pub vocab: usize,
    #[serde(default = "d_emb")]
    pub emb: usize,
    /// Decoder width; each encoder direction gets half.
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
}

fn d_emb() -> usize {
    64
}
fn d_hidden() -> usize {
    128
}
fn d_max_len() -> usize {
    64
}

impl Seq2seqConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            emb: d_emb(),
            hidden: d_hidden(),
            max_len: d_max_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= NUM_RESERVED {
            return Err(CoreError::Config(format!("vocab of {} has no ordinary tokens", self.vocab)));
        }
        if self.emb == 0 || self.hidden == 0 || self.hidden % 2 != 0 || self.max_len == 0 {
            return Err(CoreError::Config("seq2seq needs positive dims and an even hidden size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Gru {
    x: Linear,
    h: Linear,
    dim: usize,
}

impl Gru {
    fn new(store: &mut ParamStore, name: &str, input: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            x: Linear::new(store, &format!("{name}.x"), input, 3 * dim, rng),
            h: Linear::new(store, &format!("{name}.h"), dim, 3 * dim, rng),
            dim,
        }
    }

    fn step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let d = self.dim;
        let gx = self.x.forward(g, p, x)?;
        let gh = self.h.forward(g, p, h)?;
        let ax = g.slice(gx, 1, 0, 2 * d)?;
        let ah = g.slice(gh, 1, 0, 2 * d)?;
        let a = g.add(ax, ah)?;
        let rz = g.sigmoid(a)?;
        let r = g.slice(rz, 1, 0, d)?;
        let z = g.slice(rz, 1, d, d)?;
        let nx = g.slice(gx, 1, 2 * d, d)?;
        let nh = g.slice(gh, 1, 2 * d, d)?;
        let rn = g.mul(r, nh)?;
        let n = g.add(nx, rn)?;
        let n = g.tanh(n)?;
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        Ok(g.add(n, zd)?)
    }

    /// Step that only advances rows whose `keep` entry is 1.
    fn masked_step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var, keep: Var) -> Result<Var> {
        let next = self.step(g, p, x, h)?;
        let d = g.sub(next, h)?;
        let d = g.mul(d, keep)?;
        Ok(g.add(h, d)?)
    }
}

#[derive(Clone, Debug)]
pub struct Seq2seq {
    pub config: Seq2seqConfig,
    pub store: ParamStore,
    src_emb: Embedding,
    tgt_emb: Embedding,
    enc_f: Gru,
    enc_b: Gru,
    dec: Gru,
    attn: Linear,
    out: Linear,
}

/// Source/target pairs for teacher-forced training.
#[derive(Clone, Debug)]
pub struct PairData {
    pub sources: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub batch_size: usize,
}

impl PairData {
    pub fn new(sources: Vec<Vec<usize>>, targets: Vec<Vec<usize>>, batch_size: usize) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(CoreError::Dimension(format!(
                "{} sources but {} targets",
                sources.len(),
                targets.len()
            )));
        }
        if batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        Ok(Self {
            sources,
            targets,
            batch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Per-step values recorded by [`Seq2seq::trace`].
#[derive(Clone, Debug)]
pub struct Trace {
    pub memory: Tensor,
    pub hidden: Vec<Tensor>,
    pub alpha: Vec<Tensor>,
    pub context: Vec<Tensor>,
}

struct Encoded {
    memory: Var,
    bias: Var,
    init: Var,
}

fn keep_mask(g: &mut Graph, lens: &[usize], t: usize) -> Result<Var> {
    let m: Vec<f32> = lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
    Ok(g.constant(Tensor::new(vec![lens.len(), 1], m)?))
}

impl Seq2seq {
    pub fn new(config: Seq2seqConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, e, h) = (config.vocab, config.emb, config.hidden);
        let mut store = ParamStore::new();
        let src_emb = Embedding::new(&mut store, "src_emb", v, e, rng);
        let enc_f = Gru::new(&mut store, "enc_f", e, h / 2, rng);
        let enc_b = Gru::new(&mut store, "enc_b", e, h / 2, rng);
        let tgt_emb = Embedding::new(&mut store, "tgt_emb", v, e, rng);
        let dec = Gru::new(&mut store, "dec", e, h, rng);
        let attn = Linear::new(&mut store, "attn", h, h, rng);
        let out = Linear::new(&mut store, "out", 2 * h, v, rng);
        Ok(Self {
            config,
            store,
            src_emb,
            tgt_emb,
            enc_f,
            enc_b,
            dec,
            attn,
            out,
        })
    }

    fn check_ids(&self, s: &[usize]) -> Result<()> {
        if s.len() > self.config.max_len {
            return Err(CoreError::Dimension(format!(
                "sequence of length {} exceeds max length {}",
                s.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = s.iter().find(|&&i| i >= self.config.vocab) {
            return Err(CoreError::Domain(format!("token id {bad} outside vocab")));
        }
        Ok(())
    }

    fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        sources: &[Vec<usize>],
        hook: &mut dyn SiteHook,
        first_item: usize,
    ) -> Result<Encoded> {
        let b = sources.len();
        if let Some(i) = sources.iter().position(Vec::is_empty) {
            return Err(CoreError::Domain(format!("empty source sentence {}", first_item + i)));
        }
        for s in sources {
            self.check_ids(s)?;
        }
        let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
        let s_len = lens.iter().copied().max().unwrap_or(1);
        let half = self.config.hidden / 2;
        let mut ids = vec![PAD; b * s_len];
        for (i, s) in sources.iter().enumerate() {
            ids[i * s_len..i * s_len + s.len()].copy_from_slice(s);
        }
        let emb = self.src_emb.forward(g, p, &ids, &[b, s_len])?;
        let col = |g: &mut Graph, t: usize| -> Result<Var> {
            let x = g.slice(emb, 1, t, 1)?;
            Ok(g.reshape(x, &[b, self.config.emb])?)
        };
        let zero = g.constant(Tensor::zeros(vec![b, half]));
        let mut fwd = Vec::with_capacity(s_len);
        let mut h = zero;
        for t in 0..s_len {
            let x = col(g, t)?;
            let keep = keep_mask(g, &lens, t)?;
            h = self.enc_f.masked_step(g, p, x, h, keep)?;
            fwd.push(h);
        }
        let f_final = h;
        let mut bwd = vec![zero; s_len];
        let mut h = zero;
        for t in (0..s_len).rev() {
            let x = col(g, t)?;
            let keep = keep_mask(g, &lens, t)?;
            h = self.enc_b.masked_step(g, p, x, h, keep)?;
            bwd[t] = h;
        }
        let mut states = Vec::with_capacity(s_len);
        for t in 0..s_len {
            let c = g.concat(&[fwd[t], bwd[t]], 1)?;
            states.push(g.reshape(c, &[b, 1, 2 * half])?);
        }
        let memory = g.concat(&states, 1)?;
        let init = g.concat(&[f_final, bwd[0]], 1)?;
        let valid = vec![true; b];
        let tap = Tap {
            location: Location::Seq2seqEncoderOutput,
            step: 0,
            valid: &valid,
            first_item,
            rows_per_item: 1,
        };
        let init = hook.visit(g, &tap, init)?;
        let mut bias = vec![0f32; b * s_len];
        for (i, &l) in lens.iter().enumerate() {
            bias[i * s_len + l..(i + 1) * s_len].fill(NEG_INF);
        }
        let bias = g.constant(Tensor::new(vec![b, 1, s_len], bias)?);
        Ok(Encoded { memory, bias, init })
    }

    /// Attention weights `[B,1,S]` and context `[B,H]` for state `h`.
    fn attend(&self, g: &mut Graph, p: &Bound, enc: &Encoded, h: Var) -> Result<(Var, Var)> {
        let b = g.shape(h)[0];
        let d = self.config.hidden;
        let a = self.attn.forward(g, p, h)?;
        let a = g.reshape(a, &[b, 1, d])?;
        let s = g.bmm(a, enc.memory, true)?;
        let s = g.add(s, enc.bias)?;
        let alpha = g.softmax(s)?;
        let c = g.bmm(alpha, enc.memory, false)?;
        Ok((alpha, g.reshape(c, &[b, d])?))
    }

    /// One decoder step: returns the new raw state and the `[h; c]` output
    /// features after both per-step taps.
    #[allow(clippy::too_many_arguments)]
    fn dec_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        enc: &Encoded,
        prev: Var,
        h: Var,
        step: usize,
        valid: &[bool],
        hook: &mut dyn SiteHook,
        first_item: usize,
        trace: Option<&mut Trace>,
    ) -> Result<(Var, Var)> {
        let b = valid.len();
        let h_raw = self.dec.step(g, p, prev, h)?;
        let tap = |location| Tap {
            location,
            step,
            valid,
            first_item,
            rows_per_item: 1,
        };
        let h_hat = hook.visit(g, &tap(Location::Seq2seqDecoderHidden), h_raw)?;
        let (alpha, c) = self.attend(g, p, enc, h_hat)?;
        let c_hat = hook.visit(g, &tap(Location::Seq2seqContext), c)?;
        if let Some(tr) = trace {
            tr.hidden.push(g.value(h_hat).clone());
            let s = g.shape(alpha)[2];
            tr.alpha.push(g.value(alpha).clone().reshape(vec![b, s])?);
            tr.context.push(g.value(c).clone());
        }
        let o = g.concat(&[h_hat, c_hat], 1)?;
        Ok((h_raw, o))
    }

    fn embed_step(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        Ok(self.tgt_emb.forward(g, p, ids, &[ids.len()])?)
    }

    /// Teacher-forced mean token cross-entropy (EOS included).
    fn forced_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        sources: &[Vec<usize>],
        targets: &[Vec<usize>],
        hook: &mut dyn SiteHook,
        first_item: usize,
        mut trace: Option<&mut Trace>,
    ) -> Result<(Var, usize)> {
        for t in targets {
            self.check_ids(t)?;
        }
        let b = sources.len();
        let enc = self.encode(g, p, sources, hook, first_item)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.memory = g.value(enc.memory).clone();
        }
        let steps = targets.iter().map(|t| t.len() + 1).max().unwrap_or(1);
        let mut h = enc.init;
        let mut outs = Vec::with_capacity(steps);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for step in 0..steps {
            let inp: Vec<usize> = targets
                .iter()
                .map(|t| if step == 0 { BOS } else { t.get(step - 1).copied().unwrap_or(PAD) })
                .collect();
            let valid: Vec<bool> = targets.iter().map(|t| step <= t.len()).collect();
            let x = self.embed_step(g, p, &inp)?;
            let (h_raw, o) = self.dec_step(g, p, &enc, x, h, step, &valid, hook, first_item, trace.as_deref_mut())?;
            h = h_raw;
            outs.push(o);
            for (i, t) in targets.iter().enumerate() {
                if valid[i] {
                    rows.push(step * b + i);
                    labels.push(t.get(step).copied().unwrap_or(EOS));
                }
            }
        }
        let all = g.concat(&outs, 0)?;
        let sel = g.index_rows(all, &rows)?;
        let logits = self.out.forward(g, p, sel)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.pick_last(lp, &labels)?;
        let m = g.mean(picked)?;
        Ok((g.neg(m)?, rows.len()))
    }

    /// Per-step hidden states, attention weights and contexts under
    /// teacher forcing.
    pub fn trace(&self, sources: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<Trace> {
        let mut tr = Trace {
            memory: Tensor::zeros(vec![1]),
            hidden: Vec::new(),
            alpha: Vec::new(),
            context: Vec::new(),
        };
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        self.forced_loss(&mut g, &p, sources, targets, &mut super::NoHook, 0, Some(&mut tr))?;
        Ok(tr)
    }

    /// Bilinear map of the attention score, `(W, b)` with score
    /// `(h W + b) . enc`.
    pub fn attention_params(&self) -> (&Tensor, &Tensor) {
        (self.store.get(self.attn.w), self.store.get(self.attn.b))
    }

    /// Greedy free decoding, at most `len(source) + extra` tokens each.
    pub fn decode(
        &self,
        sources: &[Vec<usize>],
        extra: usize,
        batch_size: usize,
        hooks: &HookFactory<'_>,
    ) -> Result<Vec<Vec<usize>>> {
        let starts: Vec<usize> = (0..sources.len()).step_by(batch_size.max(1)).collect();
        let parts = par::map_indexed(&starts, |bi, &s| {
            let batch = &sources[s..(s + batch_size.max(1)).min(sources.len())];
            let mut hook = hooks(bi);
            self.decode_batch(batch, extra, hook.as_mut(), s)
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    fn decode_batch(
        &self,
        sources: &[Vec<usize>],
        extra: usize,
        hook: &mut dyn SiteHook,
        first_item: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let b = sources.len();
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let enc = self.encode(&mut g, &p, sources, hook, first_item)?;
        let limits: Vec<usize> = sources.iter().map(|s| (s.len() + extra).min(self.config.max_len)).collect();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let mut h = enc.init;
        let mut inp = vec![BOS; b];
        let mut step = 0;
        while done.iter().any(|d| !d) {
            let valid: Vec<bool> = done.iter().map(|d| !d).collect();
            let x = self.embed_step(&mut g, &p, &inp)?;
            let (h_raw, o) = self.dec_step(&mut g, &p, &enc, x, h, step, &valid, hook, first_item, None)?;
            h = h_raw;
            let logits = self.out.forward(&mut g, &p, o)?;
            let lv = g.value(logits);
            for i in 0..b {
                if done[i] {
                    inp[i] = PAD;
                    continue;
                }
                let row = lv.row(i);
                let mut best = EOS;
                for (id, &v) in row.iter().enumerate().skip(NUM_RESERVED) {
                    if v > row[best] {
                        best = id;
                    }
                }
                if best == EOS || out[i].len() >= limits[i] {
                    done[i] = true;
                    inp[i] = PAD;
                } else {
                    out[i].push(best);
                    inp[i] = best;
                }
            }
            step += 1;
        }
        Ok(out)
    }
}

/// Pads with `PAD` or truncates to `len`, for positional metrics.
pub fn align_to(mut hyp: Vec<usize>, len: usize) -> Vec<usize> {
    hyp.resize(len, PAD);
    hyp
}

impl Host for Seq2seq {
    type Data = PairData;

    fn kind(&self) -> HostKind {
        HostKind::Seq2seq
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn site_dim(&self, loc: Location) -> Result<usize> {
        check_kind(loc, HostKind::Seq2seq)?;
        Ok(self.config.hidden)
    }

    fn frozen_names(&self, loc: Location) -> Result<Vec<String>> {
        self.site_dim(loc)?;
        let below = |name: &str| {
            let encoder = name.starts_with("src_emb.") || name.starts_with("enc_");
            match loc {
                Location::Seq2seqEncoderOutput => encoder,
                Location::Seq2seqDecoderHidden => encoder || name.starts_with("tgt_emb.") || name.starts_with("dec."),
                _ => !name.starts_with("out."),
            }
        };
        Ok(self.store.names().filter(|n| below(n)).map(str::to_string).collect())
    }

    fn train_epoch(
        &mut self,
        data: &PairData,
        hook: &mut dyn SiteHook,
        opt: &mut OptimizerState,
        rng: &mut Rng,
    ) -> Result<f64> {
        let order = rng.permutation(data.len());
        let mut parts = Vec::new();
        for (bi, idx) in order.chunks(data.batch_size).enumerate() {
            let src: Vec<Vec<usize>> = idx.iter().map(|&i| data.sources[i].clone()).collect();
            let tgt: Vec<Vec<usize>> = idx.iter().map(|&i| data.targets[i].clone()).collect();
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let (loss, n) = self.forced_loss(&mut g, &p, &src, &tgt, hook, 0, None)?;
            let l = g.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(CoreError::Divergence {
                    term: "ce".into(),
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

    fn eval_loss(&self, data: &PairData, hooks: &HookFactory<'_>) -> Result<f64> {
        let starts: Vec<usize> = (0..data.len()).step_by(data.batch_size).collect();
        let parts = par::map_indexed(&starts, |bi, &s| {
            let e = (s + data.batch_size).min(data.len());
            let mut hook = hooks(bi);
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let (loss, n) = self.forced_loss(
                &mut g,
                &p,
                &data.sources[s..e],
                &data.targets[s..e],
                hook.as_mut(),
                s,
                None,
            )?;
            Ok((g.value(loss).item() as f64 * n as f64, n))
        })?;
        Ok(pooled(&parts))
    }

    fn visit_all(&self, data: &PairData, hook: &mut dyn SiteHook) -> Result<()> {
        for s in (0..data.len()).step_by(data.batch_size) {
            let e = (s + data.batch_size).min(data.len());
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            self.forced_loss(&mut g, &p, &data.sources[s..e], &data.targets[s..e], hook, s, None)?;
        }
        Ok(())
    }

    fn grad_norms(&self, data: &PairData, hook: &mut dyn SiteHook, bind_all: bool) -> Result<HashMap<String, f64>> {
        let e = data.batch_size.min(data.len());
        let mut g = Graph::new();
        let p = if bind_all {
            self.store.bind_with(&mut g, |_| true)
        } else {
            self.store.bind(&mut g)
        };
        let (loss, _) = self.forced_loss(&mut g, &p, &data.sources[..e], &data.targets[..e], hook, 0, None)?;
        let grads = g.backward(loss)?;
        Ok(norms_from(&self.store, &p, &grads))
    }
}
