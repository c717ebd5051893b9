//! Parameter storage, layers and optimization on top of the tape engine.
//!
//! A [`ParamStore`] owns every weight in a model as a named `Arr`. A [`Ctx`]
//! binds the store to one tape for a forward pass, inserting each parameter
//! as a single tape node (leaf when trainable, constant when frozen) so that
//! gradient accumulation per parameter happens inside the tape.

mod layers;
mod opt;

pub use layers::{
    block_diag_bias, causal_bias, key_padding_bias, Conv2d, Embedding, GroupNorm2d, LayerNorm,
    Linear, Mlp, MultiHeadAttention, ATTN_NEG,
};
pub use opt::{clip_global_norm, warmup_cosine, AdamW, AdamWConfig, GradBag};

use std::cell::RefCell;

use indexmap::IndexMap;
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{Arr, Grads, Tape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

struct Param {
    name: String,
    value: Arr,
    /// Weight decay applies only to matrices; biases, norms and other 1-d
    /// parameters are excluded.
    decay: bool,
}

/// Owns all model weights, keyed by hierarchical dot-separated names.
pub struct ParamStore {
    params: Vec<Param>,
    by_name: IndexMap<String, usize>,
    init_seed: u64,
}

impl ParamStore {
    pub fn new(init_seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: IndexMap::new(),
            init_seed,
        }
    }

    pub fn add(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let decay = value.ndim() > 1;
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            decay,
        });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    /// RNG derived from the store seed and the parameter name, so an init
    /// does not depend on the order other parameters were created in.
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.init_seed.to_le_bytes());
        h.update(name.as_bytes());
        let d = h.finalize();
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().unwrap()))
    }

    pub fn add_uniform(&mut self, name: &str, shape: &[usize], limit: f32) -> ParamId {
        let mut rng = self.rng_for(name);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, Arr::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    /// Xavier-uniform init for a `[dout, din]` projection.
    pub fn add_linear_weight(&mut self, name: &str, dout: usize, din: usize) -> ParamId {
        let limit = (6.0 / (din + dout) as f32).sqrt();
        self.add_uniform(name, &[dout, din], limit)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Arr::zeros(IxDyn(shape)))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Arr::from_elem(IxDyn(shape), 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.params[id.0].decay
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn set(&mut self, name: &str, value: Arr) -> crate::Result<()> {
        let id = self
            .by_name
            .get(name)
            .copied()
            .ok_or_else(|| crate::Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id];
        if p.value.shape() != value.shape() {
            return Err(crate::Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// SHA-256 over the name-sorted raw values of parameters selected by
    /// `filter`. Used to prove a frozen subset did not move.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut names: Vec<&Param> = self.params.iter().filter(|p| filter(&p.name)).collect();
        names.sort_by(|a, b| a.name.cmp(&b.name));
        let mut h = Sha256::new();
        for p in names {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Binds a [`ParamStore`] to one tape for a single forward pass.
pub struct Ctx<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
    cache: RefCell<Vec<Option<usize>>>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Ctx {
            tape,
            store,
            trainable: Box::new(|_| true),
            cache: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Parameters whose name fails `pred` enter the tape as constants: no
    /// backward closures are recorded through them.
    pub fn with_trainable(
        tape: &'t Tape,
        store: &'s ParamStore,
        pred: impl Fn(&str) -> bool + 's,
    ) -> Self {
        Ctx {
            tape,
            store,
            trainable: Box::new(pred),
            cache: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Fetch a parameter as a tensor, inserting it into the tape on first use.
    pub fn p(&self, id: ParamId) -> Tensor<'t> {
        if let Some(node) = self.cache.borrow()[id.0] {
            return Tensor {
                tape: self.tape,
                id: node,
            };
        }
        let value = self.store.get(id).clone();
        let t = if (self.trainable)(self.store.name(id)) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.cache.borrow_mut()[id.0] = Some(t.id);
        t
    }

    /// Pull accumulated parameter gradients out of a backward sweep.
    pub fn collect_grads(&self, grads: &mut Grads) -> Vec<(ParamId, Arr)> {
        let cache = self.cache.borrow();
        let mut out = Vec::new();
        for (idx, node) in cache.iter().enumerate() {
            let Some(node) = *node else { continue };
            let t = Tensor {
                tape: self.tape,
                id: node,
            };
            if let Some(g) = grads.take(t) {
                out.push((ParamId(idx), g));
            }
        }
        out
    }
}
