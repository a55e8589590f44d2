//! Deep relu classifier.

use super::{check_kind, norms_from, pooled, HookFactory, Host, HostKind, Location, SiteHook, Tap};
use crate::error::{CoreError, Result};
use crate::par;
use dgmr_tensor::nn::Linear;
use dgmr_tensor::{Bound, Graph, OptimizerState, ParamStore, Rng, Tensor, Var};
use std::collections::HashMap;

pub const DEFAULT_SIZES: [usize; 9] = [700, 600, 512, 256, 128, 64, 32, 16, 10];
pub const INPUT_DIM: usize = 784;
const EVAL_BATCH: usize = 500;

#[derive(Clone, Debug)]
pub struct MlpClassifier {
    pub store: ParamStore,
    pub layers: Vec<Linear>,
    pub input_dim: usize,
}

/// Labelled rows. `start = 0` holds raw inputs; `start = i` holds cached
/// activations after layer `i`, so passes run layers `i+1..`.
#[derive(Clone, Debug)]
pub struct MlpData {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub start: usize,
    pub batch_size: usize,
}

impl MlpData {
    pub fn new(x: Tensor, y: Vec<usize>, batch_size: usize) -> Result<Self> {
        if x.rank() != 2 || x.rows() != y.len() {
            return Err(CoreError::Dimension(format!(
                "{} labels for inputs of shape {:?}",
                y.len(),
                x.shape()
            )));
        }
        if batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        Ok(Self {
            x,
            y,
            start: 0,
            batch_size,
        })
    }
}

impl MlpClassifier {
    pub fn new(input_dim: usize, sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || sizes.is_empty() || sizes.contains(&0) {
            return Err(CoreError::Config(format!("bad mlp sizes {input_dim} -> {sizes:?}")));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(sizes.len());
        let mut fan_in = input_dim;
        for (i, &s) in sizes.iter().enumerate() {
            layers.push(Linear::new(&mut store, &format!("l{}", i + 1), fan_in, s, rng));
            fan_in = s;
        }
        Ok(Self {
            store,
            layers,
            input_dim,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Width of the input to layer `start + 1`.
    fn width_at(&self, start: usize) -> usize {
        if start == 0 {
            self.input_dim
        } else {
            self.layers[start - 1].fan_out
        }
    }

    /// Log-probabilities from `x` holding activations after layer `start`.
    /// Taps fire after every hidden layer from `start` on.
    pub fn forward_from(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut x: Var,
        start: usize,
        hook: &mut dyn SiteHook,
        first_item: usize,
    ) -> Result<Var> {
        let n = self.depth();
        if start >= n {
            return Err(CoreError::Site(format!("no layers above layer {start}")));
        }
        let want = self.width_at(start);
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != want {
            return Err(CoreError::Dimension(format!("mlp expects width {want}, got shape {shape:?}")));
        }
        let valid = vec![true; shape[0]];
        let tap = |i: usize| Tap {
            location: Location::MlpAfter(i),
            step: 0,
            valid: &valid,
            first_item,
            rows_per_item: 1,
        };
        if start > 0 {
            x = hook.visit(g, &tap(start), x)?;
        }
        for i in start..n {
            x = self.layers[i].forward(g, p, x)?;
            if i + 1 < n {
                x = g.relu(x)?;
                x = hook.visit(g, &tap(i + 1), x)?;
            }
        }
        Ok(g.log_softmax(x)?)
    }

    /// Class log-probabilities for one flattened image.
    pub fn forward(&self, image: &[f32]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(Tensor::new(vec![1, image.len()], image.to_vec())?);
        let out = self.forward_from(&mut g, &p, x, 0, &mut super::NoHook, 0)?;
        Ok(g.value(out).to_vec())
    }

    /// Activations after layer `layer` for every row of `x`.
    pub fn activations(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        if layer == 0 || layer >= self.depth() {
            return Err(CoreError::Site(format!("mlp has no hidden layer {layer}")));
        }
        let chunks: Vec<usize> = (0..x.rows()).step_by(EVAL_BATCH).collect();
        let parts = par::map_indexed(&chunks, |_, &s| {
            let rows: Vec<usize> = (s..(s + EVAL_BATCH).min(x.rows())).collect();
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let mut v = g.constant(x.select_rows(&rows)?);
            for l in &self.layers[..layer] {
                v = l.forward(&mut g, &p, v)?;
                v = g.relu(v)?;
            }
            Ok(g.value(v).clone())
        })?;
        let cols = self.layers[layer - 1].fan_out;
        let mut data = Vec::with_capacity(x.rows() * cols);
        for t in parts {
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::new(vec![x.rows(), cols], data)?)
    }

    /// Copy of `data` with inputs replaced by activations after `layer`.
    pub fn cache_at(&self, data: &MlpData, layer: usize) -> Result<MlpData> {
        if data.start != 0 {
            return Err(CoreError::Config("can only cache from raw inputs".into()));
        }
        Ok(MlpData {
            x: self.activations(&data.x, layer)?,
            y: data.y.clone(),
            start: layer,
            batch_size: data.batch_size,
        })
    }

    fn check_data(&self, data: &MlpData) -> Result<()> {
        if data.start >= self.depth() || data.x.cols() != self.width_at(data.start) {
            return Err(CoreError::Dimension(format!(
                "data of width {} at layer {} does not fit the mlp",
                data.x.cols(),
                data.start
            )));
        }
        if let Some(&bad) = data.y.iter().find(|&&c| c >= self.num_classes()) {
            return Err(CoreError::Domain(format!("label {bad} out of range")));
        }
        Ok(())
    }

    fn batch_nll(
        &self,
        g: &mut Graph,
        p: &Bound,
        data: &MlpData,
        rows: &[usize],
        hook: &mut dyn SiteHook,
        first_item: usize,
    ) -> Result<Var> {
        let x = g.constant(data.x.select_rows(rows)?);
        let lp = self.forward_from(g, p, x, data.start, hook, first_item)?;
        let labels: Vec<usize> = rows.iter().map(|&r| data.y[r]).collect();
        let picked = g.pick_last(lp, &labels)?;
        let m = g.mean(picked)?;
        Ok(g.neg(m)?)
    }

    /// Fraction of rows classified correctly, no taps.
    pub fn accuracy(&self, data: &MlpData) -> Result<f64> {
        self.accuracy_with(data, &super::no_hooks)
    }

    /// Accuracy with chunk `i` of `EVAL_BATCH` rows passed through `hooks(i)`.
    pub fn accuracy_with(&self, data: &MlpData, hooks: &HookFactory<'_>) -> Result<f64> {
        self.check_data(data)?;
        let chunks: Vec<usize> = (0..data.x.rows()).step_by(EVAL_BATCH).collect();
        let hits = par::map_indexed(&chunks, |bi, &s| {
            let rows: Vec<usize> = (s..(s + EVAL_BATCH).min(data.x.rows())).collect();
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let x = g.constant(data.x.select_rows(&rows)?);
            let mut hook = hooks(bi);
            let lp = self.forward_from(&mut g, &p, x, data.start, hook.as_mut(), s)?;
            let t = g.value(lp);
            Ok(rows
                .iter()
                .enumerate()
                .filter(|(i, &r)| argmax(t.row(*i)) == data.y[r])
                .count())
        })?;
        Ok(hits.iter().sum::<usize>() as f64 / data.x.rows().max(1) as f64)
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl Host for MlpClassifier {
    type Data = MlpData;

    fn kind(&self) -> HostKind {
        HostKind::Mlp
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn site_dim(&self, loc: Location) -> Result<usize> {
        check_kind(loc, HostKind::Mlp)?;
        match loc {
            Location::MlpAfter(i) if i < self.depth() => Ok(self.layers[i - 1].fan_out),
            _ => Err(CoreError::Site(format!("{loc} is not a hidden layer of a {}-layer mlp", self.depth()))),
        }
    }

    fn frozen_names(&self, loc: Location) -> Result<Vec<String>> {
        self.site_dim(loc)?;
        let Location::MlpAfter(i) = loc else { unreachable!() };
        Ok((1..=i)
            .flat_map(|l| [format!("l{l}.w"), format!("l{l}.b")])
            .collect())
    }

    fn train_epoch(
        &mut self,
        data: &MlpData,
        hook: &mut dyn SiteHook,
        opt: &mut OptimizerState,
        rng: &mut Rng,
    ) -> Result<f64> {
        self.check_data(data)?;
        let order = rng.permutation(data.x.rows());
        let mut parts = Vec::new();
        for idx in order.chunks(data.batch_size) {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let loss = self.batch_nll(&mut g, &p, data, idx, hook, 0)?;
            let l = g.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(CoreError::Divergence {
                    term: "nll".into(),
                    epoch: 0,
                    batch: parts.len(),
                });
            }
            let grads = g.backward(loss)?;
            self.store.accumulate(&p, &grads);
            opt.step(&mut self.store)?;
            parts.push((l * idx.len() as f64, idx.len()));
        }
        Ok(pooled(&parts))
    }

    fn eval_loss(&self, data: &MlpData, hooks: &HookFactory<'_>) -> Result<f64> {
        self.check_data(data)?;
        let chunks: Vec<usize> = (0..data.x.rows()).step_by(EVAL_BATCH).collect();
        let parts = par::map_indexed(&chunks, |b, &s| {
            let rows: Vec<usize> = (s..(s + EVAL_BATCH).min(data.x.rows())).collect();
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let mut hook = hooks(b);
            let loss = self.batch_nll(&mut g, &p, data, &rows, hook.as_mut(), s)?;
            Ok((g.value(loss).item() as f64 * rows.len() as f64, rows.len()))
        })?;
        Ok(pooled(&parts))
    }

    fn visit_all(&self, data: &MlpData, hook: &mut dyn SiteHook) -> Result<()> {
        self.check_data(data)?;
        for s in (0..data.x.rows()).step_by(EVAL_BATCH) {
            let rows: Vec<usize> = (s..(s + EVAL_BATCH).min(data.x.rows())).collect();
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            self.batch_nll(&mut g, &p, data, &rows, hook, s)?;
        }
        Ok(())
    }

    fn grad_norms(&self, data: &MlpData, hook: &mut dyn SiteHook, bind_all: bool) -> Result<HashMap<String, f64>> {
        self.check_data(data)?;
        let rows: Vec<usize> = (0..data.batch_size.min(data.x.rows())).collect();
        let mut g = Graph::new();
        let p = if bind_all {
            self.store.bind_with(&mut g, |_| true)
        } else {
            self.store.bind(&mut g)
        };
        let loss = self.batch_nll(&mut g, &p, data, &rows, hook, 0)?;
        let grads = g.backward(loss)?;
        Ok(norms_from(&self.store, &p, &grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let m = MlpClassifier::new(INPUT_DIM, &DEFAULT_SIZES, &mut Rng::seed(1)).unwrap();
        assert_eq!(m.depth(), 9);
        let sizes: Vec<usize> = m.layers.iter().map(|l| l.fan_out).collect();
        assert_eq!(sizes, DEFAULT_SIZES);
        let out = m.forward(&vec![0.1; INPUT_DIM]).unwrap();
        assert_eq!(out.len(), 10);
        let lse = out.iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-5);
        assert!(m.forward(&[0.0; 10]).is_err());
    }

    #[test]
    fn zero_weights_give_uniform() {
        let mut m = MlpClassifier::new(20, &[8, 10], &mut Rng::seed(2)).unwrap();
        for l in m.layers.clone() {
            l.zero(&mut m.store);
        }
        for v in m.forward(&[0.3; 20]).unwrap() {
            assert!((v + 10f32.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn cached_activations_match_full_forward() {
        let mut rng = Rng::seed(3);
        let m = MlpClassifier::new(6, &[5, 4, 3], &mut rng).unwrap();
        let x = Tensor::new(vec![7, 6], rng.normal_vec(42)).unwrap();
        let data = MlpData::new(x, vec![0, 1, 2, 0, 1, 2, 0], 4).unwrap();
        let cached = m.cache_at(&data, 1).unwrap();
        let full = m.eval_loss(&data, &super::super::no_hooks).unwrap();
        let from = m.eval_loss(&cached, &super::super::no_hooks).unwrap();
        assert!((full - from).abs() < 1e-6);
    }

    #[test]
    fn frozen_names_cover_lower_layers() {
        let m = MlpClassifier::new(6, &[5, 4, 3], &mut Rng::seed(4)).unwrap();
        assert_eq!(m.frozen_names(Location::MlpAfter(1)).unwrap(), ["l1.w", "l1.b"]);
        assert_eq!(m.site_dim(Location::MlpAfter(2)).unwrap(), 4);
        assert!(m.site_dim(Location::MlpAfter(3)).is_err());
        assert!(m.site_dim(Location::TransformerTop).is_err());
    }
}
