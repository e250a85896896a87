//! Named parameters and the small layer helpers built on the tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng as _;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// All learnable tensors of a model, keyed by dotted name.
///
/// Names are kept sorted so iteration, checkpoints and optimizer updates are
/// order-stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Glorot-uniform `[fan_in × fan_out]` weight.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        self.insert(name, Tensor::from_parts(vec![fan_in, fan_out], data));
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                v * std
            })
            .collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::filled(shape, value));
    }
}

/// Binds a [`ParamStore`] onto a tape for one forward pass. Each parameter
/// becomes a leaf the first time it is requested.
pub struct Params<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 's> Params<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Params {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Binds with some parameters already attached to existing leaves.
    pub fn with_leaves(
        tape: &'t Tape,
        store: &'s ParamStore,
        leaves: impl IntoIterator<Item = (String, Var<'t>)>,
    ) -> Self {
        Params {
            tape,
            store,
            bound: RefCell::new(leaves.into_iter().collect()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let v = self.tape.leaf(self.store.get(name)?.clone());
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient for every parameter that took part in the pass.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt(*v)))
            .collect()
    }
}

/// One affine layer `x·W + b` with `W: [in×out]`.
#[derive(Clone, Copy, Debug)]
pub struct Layer<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

/// Affine layers separated by GELU; no activation after the last layer.
/// `x` is `[n×in]` (a batch of rows).
pub fn mlp_forward<'t>(x: Var<'t>, layers: &[Layer<'t>]) -> Result<Var<'t>> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let (hs, ws) = (h.shape(), layer.weight.shape());
        if hs.len() != 2 || ws.len() != 2 || hs[1] != ws[0] {
            return Err(Error::Dimension {
                op: "mlp_forward",
                lhs: hs,
                rhs: ws,
            });
        }
        h = h.matmul(layer.weight)?.add_row(layer.bias)?;
        if i + 1 < layers.len() {
            h = h.gelu()?;
        }
    }
    Ok(h)
}

/// Parameter names and dimensions of an MLP stored under `prefix`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: &[usize]) -> Self {
        Mlp {
            prefix: prefix.into(),
            dims: dims.to_vec(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for (i, w) in self.dims.windows(2).enumerate() {
            store.init_weight(&format!("{}.w{i}", self.prefix), w[0], w[1], rng);
            store.init_const(&format!("{}.b{i}", self.prefix), &[w[1]], 0.0);
        }
    }

    pub fn layers<'t>(&self, p: &Params<'t, '_>) -> Result<Vec<Layer<'t>>> {
        (0..self.dims.len() - 1)
            .map(|i| {
                Ok(Layer {
                    weight: p.get(&format!("{}.w{i}", self.prefix))?,
                    bias: p.get(&format!("{}.b{i}", self.prefix))?,
                })
            })
            .collect()
    }

    pub fn forward<'t>(&self, p: &Params<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        mlp_forward(x, &self.layers(p)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn zero_weights_give_bias() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let w = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(Tensor::vector(vec![0.7, -0.1]).unwrap());
        let y = mlp_forward(x, &[Layer { weight: w, bias: b }]).unwrap();
        assert_eq!(y.tensor().data(), &[0.7, -0.1]);
    }

    #[test]
    fn identity_net_at_zero_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2]));
        let layer = Layer {
            weight: tape.leaf(Tensor::identity(2)),
            bias: tape.leaf(Tensor::zeros(&[2])),
        };
        let y = mlp_forward(x, &[layer, layer]).unwrap();
        assert_eq!(y.tensor().data(), &[0.0, 0.0]);
    }

    #[test]
    fn chain_break_is_dimension_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2]));
        let a = Layer {
            weight: tape.leaf(Tensor::zeros(&[2, 3])),
            bias: tape.leaf(Tensor::zeros(&[3])),
        };
        let b = Layer {
            weight: tape.leaf(Tensor::zeros(&[4, 1])),
            bias: tape.leaf(Tensor::zeros(&[1])),
        };
        assert!(matches!(mlp_forward(x, &[a, b]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn params_bind_once() {
        let mut store = ParamStore::new();
        let mut rng = rng_from(1);
        Mlp::new("m", &[2, 3, 1]).init(&mut store, &mut rng);
        assert_eq!(store.len(), 4);
        let tape = Tape::new();
        let p = Params::new(&tape, &store);
        let a = p.get("m.w0").unwrap();
        let b = p.get("m.w0").unwrap();
        assert_eq!(a.id(), b.id());
        assert!(p.get("nope").is_err());
    }
}
