use std::collections::BTreeMap;

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Param(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let count = shape.iter().product();
        let data = (0..count).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds every parameter gradient recorded on `graph`.
    pub fn accumulate_from(&mut self, graph: &Graph<'_>) -> Result<()> {
        let grads: Vec<(ParamId, Vec<f64>)> =
            graph.param_grads().map(|(id, g)| (id, g.to_vec())).collect();
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter `{name}`")))?;
        let t = &mut self.tensors[id.0];
        if t.len() != data.len() {
            return Err(Error::shape("set", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }
}

/// Fully connected layer: `y = x Wᵀ + b`, weight `[out × in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl LinearLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[output_dim, input_dim], input_dim, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[output_dim], input_dim, rng)?;
        Ok(LinearLayer {
            weight,
            bias,
            input_dim,
            output_dim,
        })
    }

    /// Applies the layer to each row of `x`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }

    pub fn forward_no_bias(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        g.linear(x, w, None)
    }
}

/// Kernel-size-1 convolution over `[channels × positions]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1x1Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1x1Layer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight =
            store.add_uniform(format!("{name}.weight"), &[out_channels, in_channels], in_channels, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[out_channels], in_channels, rng)?;
        Ok(Conv1x1Layer {
            weight,
            bias,
            in_channels,
            out_channels,
        })
    }

    /// `x` is `[in_channels × positions]`; result is `[out_channels × positions]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(w, x)?;
        g.add_col_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Gate {
    input: ParamId,
    hidden: ParamId,
    bias: ParamId,
}

impl Gate {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Gate {
            input: store.add_uniform(format!("{name}.w_in"), &[hidden, input_dim], input_dim, rng)?,
            hidden: store.add_uniform(format!("{name}.w_hid"), &[hidden, hidden], hidden, rng)?,
            bias: store.add_uniform(format!("{name}.bias"), &[hidden], hidden, rng)?,
        })
    }

    fn pre_activation(&self, g: &mut Graph<'_>, x: Var, h: Var) -> Result<Var> {
        let (wi, wh, b) = (g.param(self.input), g.param(self.hidden), g.param(self.bias));
        let from_x = g.linear(x, wi, Some(b))?;
        let from_h = g.linear(h, wh, None)?;
        g.add(from_x, from_h)
    }
}

/// Gated recurrent unit.
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// c = tanh(W_c x + U_c (r ⊙ h) + b_c)
/// h' = h + z ⊙ (c − h)
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruLayer {
    update: Gate,
    reset: Gate,
    candidate: Gate,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruLayer {
            update: Gate::new(store, &format!("{name}.update"), input_dim, hidden_dim, rng)?,
            reset: Gate::new(store, &format!("{name}.reset"), input_dim, hidden_dim, rng)?,
            candidate: Gate::new(store, &format!("{name}.candidate"), input_dim, hidden_dim, rng)?,
            input_dim,
            hidden_dim,
        })
    }

    /// Runs over the rows of `sequence` from a zero state; one `[1 × hidden]`
    /// state per row.
    pub fn forward(&self, g: &mut Graph<'_>, sequence: Var) -> Result<Vec<Var>> {
        let (steps, dim) = g.dims(sequence);
        if dim != self.input_dim {
            return Err(Error::shape("gru", &[steps, dim], &[steps, self.input_dim]));
        }
        let mut h = g.zeros(1, self.hidden_dim);
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = g.row(sequence, t)?;
            let z_pre = self.update.pre_activation(g, x, h)?;
            let z = g.sigmoid(z_pre);
            let r_pre = self.reset.pre_activation(g, x, h)?;
            let r = g.sigmoid(r_pre);
            let rh = g.mul(r, h)?;
            let c_pre = self.candidate.pre_activation(g, x, rh)?;
            let c = g.tanh(c_pre);
            let delta = g.sub(c, h)?;
            let step = g.mul(z, delta)?;
            h = g.add(h, step)?;
            states.push(h);
        }
        Ok(states)
    }

    /// Same as [`forward`](Self::forward) over a list of row vectors.
    pub fn forward_seq(&self, g: &mut Graph<'_>, sequence: &[Var]) -> Result<Vec<Var>> {
        if sequence.is_empty() {
            return Err(Error::Input("GRU needs a non-empty sequence".into()));
        }
        let stacked = g.concat_rows(sequence)?;
        self.forward(g, stacked)
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        let (u, r, c) = (self.update, self.reset, self.candidate);
        [
            u.input, u.hidden, u.bias, r.input, r.hidden, r.bias, c.input, c.hidden, c.bias,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_within_fan_in_bound_and_seeded() {
        let mut a = ParamStore::default();
        let mut b = ParamStore::default();
        LinearLayer::new(&mut a, "fc", 16, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        LinearLayer::new(&mut b, "fc", 16, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let w = a.by_name("fc.weight").unwrap();
        assert_eq!(w.shape(), &[4, 16]);
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::default();
        s.add("x", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert!(s.add("x", Tensor::vector(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn zero_gru_stays_at_zero() {
        let mut store = ParamStore::default();
        let gru = GruLayer::new(&mut store, "gru", 3, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference(&store);
        let seq = g.constant(&Tensor::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.1, 9.0]]).unwrap());
        let states = gru.forward(&mut g, seq).unwrap();
        assert_eq!(states.len(), 2);
        for s in states {
            assert!(g.value(s).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn gru_single_step_and_empty() {
        let mut store = ParamStore::default();
        let gru = GruLayer::new(&mut store, "gru", 2, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(&Tensor::vector(vec![0.2, 0.4]).unwrap());
        assert_eq!(gru.forward_seq(&mut g, &[x]).unwrap().len(), 1);
        assert!(gru.forward_seq(&mut g, &[]).is_err());
    }

    #[test]
    fn conv1x1_is_per_position_linear_map() {
        let mut store = ParamStore::default();
        let conv = Conv1x1Layer::new(&mut store, "c", 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.set("c.weight", vec![2.0, -1.0]).unwrap();
        store.set("c.bias", vec![0.5]).unwrap();
        let mut g = Graph::inference(&store);
        // two channels, three positions
        let x = g.constant(&Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap());
        let y = conv.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &[-1.5, -0.5, 0.5]);
    }
}
