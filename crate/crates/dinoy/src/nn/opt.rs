//! AdamW with decoupled weight decay, gradient accumulation and schedules.

use indexmap::IndexMap;

use super::{ParamId, ParamStore};
use crate::tensor::Arr;

/// Accumulates gradients across samples of a batch.
#[derive(Default)]
pub struct GradBag {
    grads: IndexMap<ParamId, Arr>,
}

impl GradBag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, contributions: Vec<(ParamId, Arr)>) {
        for (id, g) in contributions {
            match self.grads.get_mut(&id) {
                Some(acc) => *acc += &g,
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f32) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f32 {
        self.grads
            .values()
            .map(|g| g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn into_inner(self) -> IndexMap<ParamId, Arr> {
        self.grads
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(bag: &mut GradBag, max_norm: f32) -> f32 {
    let norm = bag.global_norm();
    if norm > max_norm && norm > 0.0 {
        bag.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup to 1.0 over `warmup` steps, then cosine decay to zero at
/// `total` steps.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize) -> f32 {
    if step < warmup {
        return (step + 1) as f32 / warmup.max(1) as f32;
    }
    let span = total.saturating_sub(warmup).max(1) as f32;
    let t = (step - warmup) as f32 / span;
    0.5 * (1.0 + (std::f32::consts::PI * t.min(1.0)).cos())
}

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    /// `(name prefix, multiplier)` applied to the base lr; the longest
    /// matching prefix wins, default multiplier is 1.
    pub lr_groups: Vec<(String, f32)>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            lr_groups: Vec::new(),
        }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    m: IndexMap<ParamId, Arr>,
    v: IndexMap<ParamId, Arr>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: IndexMap::new(),
            v: IndexMap::new(),
            step: 0,
        }
    }

    fn lr_mult(&self, name: &str) -> f32 {
        let mut best: Option<(usize, f32)> = None;
        for (prefix, mult) in &self.cfg.lr_groups {
            if name.starts_with(prefix.as_str())
                && best.map(|(l, _)| prefix.len() > l).unwrap_or(true)
            {
                best = Some((prefix.len(), *mult));
            }
        }
        best.map(|(_, m)| m).unwrap_or(1.0)
    }

    /// One update. `schedule` scales the learning rate (warmup/cosine).
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, mut bag: GradBag, schedule: f32) -> f32 {
        let norm = clip_global_norm(&mut bag, self.cfg.clip_norm);
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (id, g) in bag.into_inner() {
            let name = store.name(id).to_string();
            let lr = self.cfg.lr * self.lr_mult(&name) * schedule;
            let decay = if store.decays(id) {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |m, &g| *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g);
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |v, &g| {
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g
            });
            let p = store.get_mut(id);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * *p);
            });
        }
        norm
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Ctx;
    use crate::tensor::Tape;

    #[test]
    fn adamw_drives_a_quadratic_to_its_minimum() {
        let mut store = ParamStore::new(2);
        let w = store.add_uniform("w", &[4], 2.0);
        let target = crate::tensor::gradcheck::rand_arr(&[4], 3, -1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..400 {
            let mut bag = GradBag::new();
            {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store);
                let diff = ctx.p(w).sub(&tape.constant(target.clone()));
                let loss = diff.square().sum_all();
                let mut grads = tape.backward(loss);
                bag.add(ctx.collect_grads(&mut grads));
            }
            opt.step(&mut store, bag, 1.0);
        }
        for (a, b) in store.get(w).iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn weight_decay_skips_one_dimensional_params() {
        let mut store = ParamStore::new(2);
        let bias = store.add_ones("b", &[3]);
        let mat = store.add_ones("w", &[3, 1]);
        assert!(!store.decays(bias));
        assert!(store.decays(mat));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut store = ParamStore::new(2);
        let w = store.add_zeros("w", &[2]);
        let mut bag = GradBag::new();
        bag.add(vec![(w, ndarray::arr1(&[3.0f32, 4.0]).into_dyn())]);
        let norm = clip_global_norm(&mut bag, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        assert!((bag.global_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lr_groups_pick_longest_prefix() {
        let opt = AdamW::new(AdamWConfig {
            lr_groups: vec![("backbone.".into(), 0.1), ("backbone.stem.".into(), 0.5)],
            ..Default::default()
        });
        assert_eq!(opt.lr_mult("backbone.stem.w"), 0.5);
        assert_eq!(opt.lr_mult("backbone.layer1.w"), 0.1);
        assert_eq!(opt.lr_mult("head.w"), 1.0);
    }

    #[test]
    fn warmup_then_cosine_decay() {
        assert!(warmup_cosine(0, 100, 10) < 0.2);
        assert!((warmup_cosine(9, 100, 10) - 1.0).abs() < 1e-6);
        assert!(warmup_cosine(55, 100, 10) < 1.0);
        assert!(warmup_cosine(99, 100, 10) < 0.01);
    }
}
