//! On-disk form of a split: a JSON sidecar with the recipe (config + seeds)
//! and a binary container with the first few scenes materialized for
//! inspection. Training regenerates scenes from the recipe, so the sidecar is
//! the source of truth and the container is a convenience.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::data::shapes::Placement;
use crate::data::{DataConfig, GroundingSample, SceneMix, SceneObject, SplitPlan};
use crate::error::{Error, Result};
use crate::tensor::Arr;

pub const SPLIT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct SplitMeta {
    pub format_version: u32,
    pub name: String,
    pub config: DataConfig,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub materialized: usize,
}

/// Training splits must not leak the names of categories they exclude, so a
/// held-in-only split is written with held-out names replaced by a
/// rank-keyed placeholder. Scene generation never reads names, so the
/// redacted recipe regenerates the exact same scenes.
fn config_for_disk(plan: &SplitPlan) -> DataConfig {
    let mut cfg = plan.config.clone();
    if cfg.mix == SceneMix::HeldInOnly {
        for c in cfg.categories.iter_mut().filter(|c| c.held_out) {
            c.name = format!("withheld-{}", c.frequency_rank);
        }
    }
    cfg
}

pub fn write_split(dir: &Path, plan: &SplitPlan, materialize: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let config = config_for_disk(plan);
    let materialized = materialize.min(plan.seeds.len());
    let meta = SplitMeta {
        format_version: SPLIT_FORMAT_VERSION,
        name: plan.name.clone(),
        config_digest: config.digest(),
        config,
        seeds: plan.seeds.clone(),
        materialized,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;

    let mut c = Container::new();
    for i in 0..materialized {
        let s = plan.scene(i)?;
        let pre = format!("scene{i}");
        c.put_f32(&format!("{pre}/image"), &s.image);
        let n = s.objects.len();
        c.put_u64(
            &format!("{pre}/categories"),
            vec![n],
            s.objects.iter().map(|o| o.category as u64).collect(),
        );
        c.put_f32(&format!("{pre}/boxes"), &boxes_arr(&s.objects));
        let size = s.image.shape()[1];
        let mut masks = Vec::with_capacity(n * size * size);
        for o in &s.objects {
            masks.extend(o.mask.iter().copied());
        }
        c.put_u8(&format!("{pre}/masks"), vec![n, size, size], masks);
        let mut kp = Vec::new();
        let mut offsets = vec![0u64];
        for o in &s.objects {
            for p in &o.keypoints {
                kp.extend_from_slice(p);
            }
            offsets.push(kp.len() as u64 / 3);
        }
        let kp_rows = kp.len() / 3;
        c.put(
            &format!("{pre}/keypoints"),
            crate::container::Entry::F32 {
                shape: vec![kp_rows, 3],
                data: kp,
            },
        );
        c.put_u64(&format!("{pre}/keypoint_offsets"), vec![n + 1], offsets);
        c.put_u64(
            &format!("{pre}/captions"),
            vec![n, 3],
            s.objects
                .iter()
                .flat_map(|o| o.caption.iter().map(|&t| t as u64))
                .collect(),
        );
        c.put_u64(
            &format!("{pre}/areas"),
            vec![n, 2],
            s.objects
                .iter()
                .flat_map(|o| [o.visible_area as u64, o.amodal_area as u64])
                .collect(),
        );
        c.put_f64(
            &format!("{pre}/placements"),
            vec![n, 4],
            s.objects
                .iter()
                .flat_map(|o| {
                    [
                        o.placement.cx,
                        o.placement.cy,
                        o.placement.scale,
                        o.placement.rot,
                    ]
                })
                .collect(),
        );
    }
    c.write_to(&dir.join("scenes.bin"))
}

fn boxes_arr(objects: &[SceneObject]) -> Arr {
    let mut data = Vec::with_capacity(objects.len() * 4);
    for o in objects {
        data.extend_from_slice(&o.box_cxcywh);
    }
    Arr::from_shape_vec(ndarray::IxDyn(&[objects.len(), 4]), data).unwrap()
}

pub fn read_split_meta(dir: &Path) -> Result<SplitMeta> {
    let bytes = std::fs::read(dir.join("meta.json"))
        .map_err(|e| Error::Data(format!("no split at {}: {e}", dir.display())))?;
    let meta: SplitMeta = serde_json::from_slice(&bytes)?;
    if meta.format_version != SPLIT_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "split format {} unsupported (expected {})",
            meta.format_version, SPLIT_FORMAT_VERSION
        )));
    }
    if meta.config_digest != meta.config.digest() {
        return Err(Error::Data("split config digest mismatch".into()));
    }
    Ok(meta)
}

pub fn read_split(dir: &Path) -> Result<SplitPlan> {
    let meta = read_split_meta(dir)?;
    Ok(SplitPlan {
        name: meta.name,
        config: meta.config,
        seeds: meta.seeds,
    })
}

/// Load the scenes that `write_split` materialized. Phrases are rebuilt from
/// the category table in first-appearance order, mirroring generation.
pub fn read_materialized(dir: &Path) -> Result<Vec<GroundingSample>> {
    let meta = read_split_meta(dir)?;
    let c = Container::read_from(&dir.join("scenes.bin"))?;
    let mut out = Vec::with_capacity(meta.materialized);
    for i in 0..meta.materialized {
        let pre = format!("scene{i}");
        let image = c.get_f32(&format!("{pre}/image"))?;
        let (_, cats) = c.get_u64(&format!("{pre}/categories"))?;
        let boxes = c.get_f32(&format!("{pre}/boxes"))?;
        let (mshape, masks) = c.get_u8(&format!("{pre}/masks"))?;
        let (_, kp) = {
            let e = c.get(&format!("{pre}/keypoints"))?;
            match e {
                crate::container::Entry::F32 { shape, data } => (shape.clone(), data.clone()),
                _ => return Err(Error::Data("keypoints entry has wrong dtype".into())),
            }
        };
        let (_, offsets) = c.get_u64(&format!("{pre}/keypoint_offsets"))?;
        let (_, captions) = c.get_u64(&format!("{pre}/captions"))?;
        let (_, areas) = c.get_u64(&format!("{pre}/areas"))?;
        let (_, placements) = c.get_f64(&format!("{pre}/placements"))?;

        let n = cats.len();
        let (h, w) = (mshape[1], mshape[2]);
        let mut objects = Vec::with_capacity(n);
        let mut phrases: Vec<String> = Vec::new();
        for j in 0..n {
            let cat = cats[j] as usize;
            let mask = ndarray::Array2::from_shape_vec(
                (h, w),
                masks[j * h * w..(j + 1) * h * w].to_vec(),
            )
            .unwrap();
            let keypoints = (offsets[j] as usize..offsets[j + 1] as usize)
                .map(|r| [kp[r * 3], kp[r * 3 + 1], kp[r * 3 + 2]])
                .collect();
            let name = &meta.config.categories[cat].name;
            if !phrases.iter().any(|p| p == name) {
                phrases.push(name.clone());
            }
            objects.push(SceneObject {
                category: cat,
                box_cxcywh: [
                    boxes[[j, 0]],
                    boxes[[j, 1]],
                    boxes[[j, 2]],
                    boxes[[j, 3]],
                ],
                mask,
                keypoints,
                caption: captions[j * 3..(j + 1) * 3].iter().map(|&t| t as u32).collect(),
                visible_area: areas[j * 2] as usize,
                amodal_area: areas[j * 2 + 1] as usize,
                placement: Placement {
                    cx: placements[j * 4],
                    cy: placements[j * 4 + 1],
                    scale: placements[j * 4 + 2],
                    rot: placements[j * 4 + 3],
                },
            });
        }
        out.push(GroundingSample {
            image,
            objects,
            phrases,
            seed: meta.seeds[i],
        });
    }
    Ok(out)
}

/// Save a `[3, H, W]` image in [0,1] as an 8-bit PNG.
pub fn save_png(path: &Path, arr: &Arr) -> Result<()> {
    let sh = arr.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::Shape {
            op: "save_png",
            expected: "[3, H, W]".into(),
            got: format!("{sh:?}"),
        });
    }
    let (h, w) = (sh[1], sh[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (arr[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (arr[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (arr[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Load an RGB PNG as a `[3, H, W]` float image in [0,1].
pub fn load_png(path: &Path) -> Result<Arr> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Arr::zeros(ndarray::IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out[[ch, y, x]] = px.0[ch] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_splits, DataConfig};

    fn small_cfg() -> DataConfig {
        DataConfig {
            image_size: 64,
            max_objects: 4,
            train_scenes: 6,
            val_scenes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn split_round_trips_and_regenerates() {
        let dir = tempfile::tempdir().unwrap();
        let splits = make_splits(&small_cfg()).unwrap();
        write_split(dir.path(), &splits.train, 3).unwrap();

        let plan = read_split(dir.path()).unwrap();
        assert_eq!(plan.seeds, splits.train.seeds);
        let stored = read_materialized(dir.path()).unwrap();
        assert_eq!(stored.len(), 3);
        for (i, got) in stored.iter().enumerate() {
            let want = plan.scene(i).unwrap();
            assert_eq!(got.image, want.image, "image {i} differs");
            assert_eq!(got.objects.len(), want.objects.len());
            for (a, b) in got.objects.iter().zip(&want.objects) {
                assert_eq!(a.category, b.category);
                assert_eq!(a.box_cxcywh, b.box_cxcywh);
                assert_eq!(a.mask, b.mask);
                assert_eq!(a.keypoints, b.keypoints);
                assert_eq!(a.caption, b.caption);
            }
            assert_eq!(got.phrases, want.phrases);
        }
    }

    #[test]
    fn redacted_recipe_regenerates_identical_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let splits = make_splits(&small_cfg()).unwrap();
        write_split(dir.path(), &splits.train, 0).unwrap();
        let plan = read_split(dir.path()).unwrap();
        for i in 0..3 {
            let a = plan.scene(i).unwrap();
            let b = splits.train.scene(i).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.phrases, b.phrases);
        }
    }

    #[test]
    fn train_split_files_never_mention_held_out_names() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let splits = make_splits(&cfg).unwrap();
        write_split(&dir.path().join("train"), &splits.train, 2).unwrap();
        write_split(&dir.path().join("val_held_out"), &splits.val_held_out, 2).unwrap();

        let held_out_names: Vec<&str> = cfg
            .categories
            .iter()
            .filter(|c| c.held_out)
            .map(|c| c.name.as_str())
            .collect();
        assert!(!held_out_names.is_empty());

        let scan = |sub: &str| -> Vec<u8> {
            let mut bytes = Vec::new();
            for f in ["meta.json", "scenes.bin"] {
                bytes.extend(std::fs::read(dir.path().join(sub).join(f)).unwrap());
            }
            bytes
        };
        let contains = |hay: &[u8], needle: &str| {
            hay.windows(needle.len()).any(|w| w == needle.as_bytes())
        };

        let train_bytes = scan("train");
        for name in &held_out_names {
            assert!(
                !contains(&train_bytes, name),
                "train split leaks category name {name}"
            );
        }
        let val_bytes = scan("val_held_out");
        assert!(held_out_names.iter().any(|n| contains(&val_bytes, n)));
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.png");
        let s = crate::data::generate_scene(5, &small_cfg()).unwrap();
        save_png(&path, &s.image).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), s.image.shape());
        for (a, b) in back.iter().zip(s.image.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn tampered_meta_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let splits = make_splits(&small_cfg()).unwrap();
        write_split(dir.path(), &splits.train, 0).unwrap();
        let p = dir.path().join("meta.json");
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replace("\"zipf_exponent\": 1.0", "\"zipf_exponent\": 2.0"))
            .unwrap();
        assert!(read_split(dir.path()).is_err());
    }
}
