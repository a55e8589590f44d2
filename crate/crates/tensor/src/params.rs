use std::collections::HashMap;
use std::ops::Index;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters of one model, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f32).sqrt()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            tensor,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from the Xavier uniform range.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let a = xavier_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).unwrap())
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Replace the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))?;
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(TensorError::Shape {
                op: "ParamStore::set",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn set_trainable(&mut self, trainable: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = trainable(&p.name);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Bind every parameter into `g`; trainable ones require gradients.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, |p| p.trainable)
    }

    /// Bind every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, |_| false)
    }

    pub fn bind_with(&self, g: &mut Graph, requires_grad: impl Fn(&Param) -> bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.leaf(p.tensor.clone(), requires_grad(p)))
                .collect(),
        )
    }

    /// Add the gradients of bound parameters into each tensor's grad buffer.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(gv) = grads.get(v) {
                p.tensor.accumulate_grad(gv);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        self.checksum_where(|_| true)
    }

    pub fn checksum_where(&self, include: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| include(&p.name)) {
            eat(p.name.as_bytes());
            for &d in p.tensor.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
