//! Named parameter/buffer storage shared by every model, plus weight
//! initializers. BTreeMap keys give a stable iteration order, which the
//! determinism and checksum contracts rely on.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::graph::{Arr, Graph, NodeId};

/// Trainable parameters plus non-trainable buffers (e.g. batch-norm running
/// statistics). Both are persisted in checkpoints; only params are optimized.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: BTreeMap<String, Arr>,
    pub buffers: BTreeMap<String, Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        assert!(
            self.buffers.insert(name.clone(), value).is_none(),
            "duplicate buffer {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Arr {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Arr {
        self.buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    /// Total number of trainable scalars.
    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Bit-exact FNV-1a checksum over all parameters (names and values) —
    /// the frozen-model contract is asserted with this.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, arr) in &self.params {
            eat(name.as_bytes());
            for v in arr.iter() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Records which graph leaf holds which named parameter during one forward
/// pass, so gradients can be routed back to the optimizer afterwards.
/// Binding the same name twice (a model forwarded repeatedly in one graph)
/// reuses the leaf, so gradient contributions accumulate in one slot.
#[derive(Debug, Default)]
pub struct Bindings {
    pub pairs: Vec<(String, NodeId)>,
    cache: BTreeMap<String, NodeId>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind a parameter as a graph leaf. `trainable = false` produces a
    /// constant leaf: gradients stop at it (frozen-network semantics) while
    /// still flowing through to the op's other inputs.
    pub fn bind(
        &mut self,
        g: &mut Graph,
        ps: &ParamSet,
        name: &str,
        trainable: bool,
    ) -> NodeId {
        if let Some(&id) = self.cache.get(name) {
            return id;
        }
        let id = g.leaf(ps.get(name).clone(), trainable);
        self.cache.insert(name.to_string(), id);
        if trainable {
            self.pairs.push((name.to_string(), id));
        }
        id
    }

    /// Owned (name, gradient) pairs after `backward`, for `Adam::step_groups`.
    pub fn grads_owned(&self, g: &Graph) -> Vec<(String, Arr)> {
        self.pairs
            .iter()
            .filter_map(|(n, id)| g.grad(*id).map(|gr| (n.clone(), gr.clone())))
            .collect()
    }

    /// Collect (name, gradient) pairs after `backward`.
    pub fn grads<'g>(&self, g: &'g Graph) -> Vec<(&str, &'g Arr)> {
        self.pairs
            .iter()
            .filter_map(|(n, id)| g.grad(*id).map(|gr| (n.as_str(), gr)))
            .collect()
    }
}

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual conv default.
pub fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Arr {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || (rng.gen::<f64>() * 2.0 - 1.0) * bound)
}

/// Gaussian init with the given std (GAN convention: N(0, 0.02)).
pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Arr {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || box_muller(rng) * std)
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

fn box_muller(rng: &mut impl Rng) -> f64 {
    // u in (0,1] to keep ln finite
    let u = 1.0 - rng.gen::<f64>();
    let v = rng.gen::<f64>();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}
