use super::graph::{Activation, Graph, NodeId};
use super::{GraphError, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
}

/// Owner of all trainable tensors, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            value,
        });
        id
    }

    /// Weights uniform in `±sqrt(6 / (in + out))`.
    pub fn add_glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        let t = Tensor::new(vec![fan_in, fan_out], values).expect("positive dims");
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Vec<f64> {
        let p = &self.params[id.0].value;
        p.grad().map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.grad_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        let slot = self.params[id.0].value.grad_mut();
        slot.iter_mut().zip(g).for_each(|(c, v)| *c += v);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.values().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// All gradients concatenated in id order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.ids().flat_map(|id| self.grad(id)).collect()
    }
}

/// Fully connected layer `activation(x · W + b)`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            activation,
        }
    }

    /// Layer with all-zero weights and bias.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId, GraphError> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.dense(x, w, b, self.activation)
    }
}

/// Stack of dense layers; an empty stack is the identity map.
#[derive(Debug, Clone, Default)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Hidden layers share `hidden_act`; the last layer uses `out_act`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut Rng,
    ) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { out_act } else { hidden_act };
                Dense::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: NodeId) -> Result<NodeId, GraphError> {
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let d = Dense::new(&mut store, "l", 10, 14, Activation::Tanh, &mut rng);
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(store.value(d.weight).values().iter().all(|v| v.abs() <= limit));
        assert!(store.value(d.bias).values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flatten_round_trip() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2);
        Mlp::new(&mut store, "m", &[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let flat = store.flatten();
        let mut other = store.clone();
        other.assign_flat(&vec![0.0; flat.len()]);
        other.assign_flat(&flat);
        assert_eq!(other.flatten(), flat);
        assert_eq!(store.numel(), 3 * 4 + 4 + 4 * 2 + 2);
    }
}
