//! Deterministic shapes-world grounding corpus: long-tail categories,
//! compositional holdout, exact masks/boxes/keypoints, attribute captions.

pub mod io;
pub mod shapes;
pub mod vocab;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Arr;
use shapes::{keypoint_template, mask_bounds, rasterize, Placement, ShapeKind, ALL_SHAPES};

/// Render colors for the eight color words, indexed like `vocab::COLORS`.
pub const COLOR_RGB: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10], // red
    [0.10, 0.80, 0.15], // green
    [0.15, 0.20, 0.90], // blue
    [0.95, 0.85, 0.10], // yellow
    [0.55, 0.15, 0.75], // purple
    [0.95, 0.55, 0.10], // orange
    [0.10, 0.80, 0.85], // cyan
    [0.90, 0.15, 0.70], // magenta
];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CategorySpec {
    pub name: String,
    pub shape: ShapeKind,
    /// index into `vocab::COLORS` / `COLOR_RGB`
    pub color: usize,
    /// 1 = most frequent
    pub frequency_rank: usize,
    pub held_out: bool,
}

/// Which categories a generated scene may contain.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum SceneMix {
    /// training scenes: held-out categories never appear
    HeldInOnly,
    /// zero-shot val: first object drawn from the held-out set
    RequireHeldOut,
    /// unrestricted (diagnostics)
    AnyCategory,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub zipf_exponent: f64,
    /// amplitude of uniform per-pixel noise added to the composite
    pub noise_amp: f32,
    pub mix: SceneMix,
    pub categories: Vec<CategorySpec>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed0: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 128,
            min_objects: 1,
            max_objects: 8,
            zipf_exponent: 1.0,
            noise_amp: 0.03,
            mix: SceneMix::HeldInOnly,
            categories: standard_categories(0.25).unwrap(),
            train_scenes: 4000,
            val_scenes: 64,
            seed0: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(Error::Config(format!(
                "image_size {} too small; need at least 64",
                self.image_size
            )));
        }
        if self.min_objects == 0 {
            return Err(Error::Config("object count range must start at 1".into()));
        }
        if self.max_objects < self.min_objects {
            return Err(Error::Config("max_objects < min_objects".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("empty category table".into()));
        }
        let mut names = std::collections::HashSet::new();
        let mut pairs = std::collections::HashSet::new();
        for c in &self.categories {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate category name {}", c.name)));
            }
            if !pairs.insert((c.shape, c.color)) {
                return Err(Error::Config(format!(
                    "duplicate shape/color pair for {}",
                    c.name
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding; identifies the corpus.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn held_in_indices(&self) -> Vec<usize> {
        (0..self.categories.len())
            .filter(|&i| !self.categories[i].held_out)
            .collect()
    }

    pub fn held_out_indices(&self) -> Vec<usize> {
        (0..self.categories.len())
            .filter(|&i| self.categories[i].held_out)
            .collect()
    }
}

/// The default 20-category table: all five shapes crossed with a rotating
/// palette so every shape and color occurs several times at different
/// frequency ranks.
pub fn standard_categories(holdout_fraction: f32) -> Result<Vec<CategorySpec>> {
    let mut cats = Vec::new();
    for rank in 1..=20usize {
        let shape = ALL_SHAPES[(rank - 1) % 5];
        let color = (rank - 1) % 8;
        let name = format!("{} {}", vocab::COLORS[color], shape.word());
        cats.push(CategorySpec {
            name,
            shape,
            color,
            frequency_rank: rank,
            held_out: false,
        });
    }
    assign_holdout(&mut cats, holdout_fraction)?;
    Ok(cats)
}

/// Mark `ceil(fraction·n)` categories held-out, preferring the rarest, while
/// keeping at least one held-in category for every shape and every color so
/// the holdout tests composition rather than unseen primitives.
pub fn assign_holdout(cats: &mut [CategorySpec], fraction: f32) -> Result<()> {
    let n = cats.len();
    let target = (fraction * n as f32).ceil() as usize;
    if target < 2 || n - target < 2 {
        return Err(Error::Config(format!(
            "holdout fraction {fraction} leaves fewer than 2 categories on one side"
        )));
    }
    for c in cats.iter_mut() {
        c.held_out = false;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cats[b].frequency_rank.cmp(&cats[a].frequency_rank));
    let mut marked = 0;
    for &i in &order {
        if marked == target {
            break;
        }
        let shape_still_covered = cats
            .iter()
            .enumerate()
            .any(|(j, c)| j != i && !c.held_out && c.shape == cats[i].shape);
        let color_still_covered = cats
            .iter()
            .enumerate()
            .any(|(j, c)| j != i && !c.held_out && c.color == cats[i].color);
        if shape_still_covered && color_still_covered {
            cats[i].held_out = true;
            marked += 1;
        }
    }
    if marked < target {
        return Err(Error::Config(
            "cannot satisfy holdout coverage constraints".into(),
        ));
    }
    Ok(())
}

/// Discrete Zipf sampler over a list of frequency ranks.
pub struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    pub fn new(ranks: &[usize], exponent: f64) -> Zipf {
        assert!(!ranks.is_empty());
        let weights: Vec<f64> = ranks
            .iter()
            .map(|&r| 1.0 / (r as f64).powf(exponent))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in weights {
            acc += w / total;
            cdf.push(acc);
        }
        Zipf { cdf }
    }

    /// Returns an index into the rank list passed at construction.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random_range(0.0..1.0);
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    /// index into `DataConfig::categories`
    pub category: usize,
    /// normalized (cx, cy, w, h) bounding the visible mask
    pub box_cxcywh: [f32; 4],
    /// modal (visible-pixel) mask at image resolution
    pub mask: Array2<u8>,
    /// (x, y, visibility) per keypoint, coords normalized
    pub keypoints: Vec<[f32; 3]>,
    /// "<color> <size-word> <shape>" token ids
    pub caption: Vec<u32>,
    pub visible_area: usize,
    pub amodal_area: usize,
    /// similarity transform that produced the instance (template space → px)
    pub placement: Placement,
}

#[derive(Clone, Debug)]
pub struct GroundingSample {
    /// `[3, H, W]`, values in [0,1]
    pub image: Arr,
    pub objects: Vec<SceneObject>,
    /// unique category names present, in first-appearance order
    pub phrases: Vec<String>,
    pub seed: u64,
}

const MIN_VISIBLE_FRACTION: f64 = 0.30;
const PLACE_ATTEMPTS: usize = 40;

pub fn generate_scene(seed: u64, cfg: &DataConfig) -> Result<GroundingSample> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_slots = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let bg: [f32; 3] = [
        rng.random_range(0.05..0.25),
        rng.random_range(0.05..0.25),
        rng.random_range(0.05..0.25),
    ];

    let held_in = cfg.held_in_indices();
    let held_out = cfg.held_out_indices();
    let all: Vec<usize> = (0..cfg.categories.len()).collect();
    let ranks_of = |idx: &[usize]| -> Vec<usize> {
        idx.iter()
            .map(|&i| cfg.categories[i].frequency_rank)
            .collect()
    };
    let zipf_in = Zipf::new(&ranks_of(&held_in), cfg.zipf_exponent);
    let zipf_all = Zipf::new(&ranks_of(&all), cfg.zipf_exponent);
    let zipf_out = if held_out.is_empty() {
        None
    } else {
        Some(Zipf::new(&ranks_of(&held_out), cfg.zipf_exponent))
    };

    // accepted objects, in paint order (later entries drawn on top)
    let mut cats: Vec<usize> = Vec::new();
    let mut places: Vec<Placement> = Vec::new();
    let mut amodal: Vec<Array2<u8>> = Vec::new();
    let mut amodal_count: Vec<usize> = Vec::new();
    let mut visible_count: Vec<usize> = Vec::new();
    // topmost accepted object per pixel, -1 = background
    let mut owner = Array2::<i32>::from_elem((size, size), -1);

    for slot in 0..n_slots {
        let cat_idx = match cfg.mix {
            SceneMix::HeldInOnly => held_in[zipf_in.sample(&mut rng)],
            SceneMix::AnyCategory => all[zipf_all.sample(&mut rng)],
            SceneMix::RequireHeldOut => {
                if slot == 0 {
                    let z = zipf_out.as_ref().ok_or_else(|| {
                        Error::Config("RequireHeldOut with no held-out categories".into())
                    })?;
                    held_out[z.sample(&mut rng)]
                } else {
                    all[zipf_all.sample(&mut rng)]
                }
            }
        };
        let shape = cfg.categories[cat_idx].shape;

        for _attempt in 0..PLACE_ATTEMPTS {
            let scale = rng.random_range(0.07..0.21) * size as f64;
            let rot = if shape == ShapeKind::Circle {
                0.0
            } else {
                rng.random_range(0.0..std::f64::consts::TAU)
            };
            let margin = scale + 1.0;
            let cx = rng.random_range(margin..size as f64 - margin);
            let cy = rng.random_range(margin..size as f64 - margin);
            let place = Placement { cx, cy, scale, rot };
            let mask = rasterize(shape, &place, size);
            let Some((x0, y0, x1, y1)) = mask_bounds(&mask) else {
                continue;
            };
            if x1 - x0 + 1 < 6 || y1 - y0 + 1 < 6 {
                continue;
            }
            let candidate_count = mask.iter().filter(|&&v| v != 0).count();

            // how many visible pixels each accepted object would lose
            let mut loss = vec![0usize; cats.len()];
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if mask[[yy, xx]] != 0 {
                        let o = owner[[yy, xx]];
                        if o >= 0 {
                            loss[o as usize] += 1;
                        }
                    }
                }
            }
            let feasible = (0..cats.len()).all(|j| {
                (visible_count[j] - loss[j]) as f64
                    >= MIN_VISIBLE_FRACTION * amodal_count[j] as f64
            });
            if !feasible {
                continue;
            }

            for j in 0..cats.len() {
                visible_count[j] -= loss[j];
            }
            let id = cats.len() as i32;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if mask[[yy, xx]] != 0 {
                        owner[[yy, xx]] = id;
                    }
                }
            }
            cats.push(cat_idx);
            places.push(place);
            amodal.push(mask);
            amodal_count.push(candidate_count);
            visible_count.push(candidate_count);
            break;
        }
    }
    assert!(!cats.is_empty(), "first placement cannot fail");

    // composite image
    let mut image = Arr::zeros(ndarray::IxDyn(&[3, size, size]));
    for y in 0..size {
        for x in 0..size {
            let o = owner[[y, x]];
            let rgb = if o >= 0 {
                COLOR_RGB[cfg.categories[cats[o as usize]].color]
            } else {
                bg
            };
            for ch in 0..3 {
                image[[ch, y, x]] = rgb[ch];
            }
        }
    }
    if cfg.noise_amp > 0.0 {
        let a = cfg.noise_amp;
        for v in image.iter_mut() {
            *v = (*v + rng.random_range(-a..a)).clamp(0.0, 1.0);
        }
    }

    // per-object annotations from the final owner grid
    let mut objects = Vec::with_capacity(cats.len());
    let mut phrases: Vec<String> = Vec::new();
    for j in 0..cats.len() {
        let mut modal = Array2::<u8>::zeros((size, size));
        for y in 0..size {
            for x in 0..size {
                if owner[[y, x]] == j as i32 {
                    modal[[y, x]] = 1;
                }
            }
        }
        let Some((x0, y0, x1, y1)) = mask_bounds(&modal) else {
            continue; // fully covered objects were prevented, but stay safe
        };
        // tight pixel box expanded by half a pixel so outline keypoints of an
        // unoccluded shape always fall inside
        let (bx0, by0) = (x0 as f64 - 0.5, y0 as f64 - 0.5);
        let (bx1, by1) = (x1 as f64 + 1.5, y1 as f64 + 1.5);
        let s = size as f64;
        let box_cxcywh = [
            ((bx0 + bx1) / 2.0 / s) as f32,
            ((by0 + by1) / 2.0 / s) as f32,
            ((bx1 - bx0) / s) as f32,
            ((by1 - by0) / s) as f32,
        ];

        let cat = &cfg.categories[cats[j]];
        let mut keypoints = Vec::new();
        for v in keypoint_template(cat.shape) {
            let p = places[j].apply(v);
            let (px, py) = (p[0], p[1]);
            let ix = px.floor().clamp(0.0, s - 1.0) as usize;
            let iy = py.floor().clamp(0.0, s - 1.0) as usize;
            let covered_by_later = owner[[iy, ix]] > j as i32;
            let inside_box = px >= bx0 && px <= bx1 && py >= by0 && py <= by1;
            let vis = if !covered_by_later && inside_box { 1.0 } else { 0.0 };
            keypoints.push([(px / s) as f32, (py / s) as f32, vis]);
        }

        let r_norm = places[j].scale / s;
        let size_idx = if r_norm < 0.11 {
            0
        } else if r_norm < 0.16 {
            1
        } else {
            2
        };
        let caption = vec![
            vocab::color_token(cat.color),
            vocab::size_token(size_idx),
            vocab::shape_token(cat.shape.index()),
        ];

        if !phrases.iter().any(|p| p == &cat.name) {
            phrases.push(cat.name.clone());
        }
        objects.push(SceneObject {
            category: cats[j],
            box_cxcywh,
            mask: modal,
            keypoints,
            caption,
            visible_area: visible_count[j],
            amodal_area: amodal_count[j],
            placement: places[j],
        });
    }
    let _ = amodal;

    Ok(GroundingSample {
        image,
        objects,
        phrases,
        seed,
    })
}

/// A split is a scene mix plus the seeds that generate its scenes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitPlan {
    pub name: String,
    pub config: DataConfig,
    pub seeds: Vec<u64>,
}

impl SplitPlan {
    pub fn scene(&self, i: usize) -> Result<GroundingSample> {
        generate_scene(self.seeds[i], &self.config)
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

pub struct Splits {
    pub train: SplitPlan,
    pub val_held_in: SplitPlan,
    pub val_held_out: SplitPlan,
}

pub fn make_splits(cfg: &DataConfig) -> Result<Splits> {
    cfg.validate()?;
    let held_out = cfg.held_out_indices();
    let held_in = cfg.held_in_indices();
    if held_out.len() < 2 || held_in.len() < 2 {
        return Err(Error::Config(
            "need at least 2 categories on each side of the holdout".into(),
        ));
    }
    let plan = |name: &str, mix: SceneMix, base: u64, n: usize| -> SplitPlan {
        let mut config = cfg.clone();
        config.mix = mix;
        SplitPlan {
            name: name.to_string(),
            config,
            seeds: (0..n as u64).map(|i| cfg.seed0 + base + i).collect(),
        }
    };
    Ok(Splits {
        train: plan("train", SceneMix::HeldInOnly, 0, cfg.train_scenes),
        val_held_in: plan(
            "val_held_in",
            SceneMix::HeldInOnly,
            1_000_000,
            cfg.val_scenes,
        ),
        val_held_out: plan(
            "val_held_out",
            SceneMix::RequireHeldOut,
            2_000_000,
            cfg.val_scenes,
        ),
    })
}
