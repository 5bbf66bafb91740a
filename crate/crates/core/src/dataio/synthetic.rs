//! Spurious-cue dataset with known "human" maps.
//!
//! Every image holds its class's diagnostic patch on a ring around the
//! center. A small dot in the top-left corner marks the true class with
//! probability `rho_spur` and a uniformly drawn class otherwise, so models
//! can shortcut through the corner. The human map is a Gaussian bump on the
//! patch alone.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{read_json, write_fmap, write_gray_png, write_json, DataError, Result};
use crate::diffcore::Tensor;
use crate::explain::{ImportanceMap, RaterMap};
use crate::harmonize::TrainSample;
use crate::metrics::ImageRaters;
use crate::seeding;
use crate::stimuli::GrayImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub size: usize,
    pub classes: usize,
    /// Side of the square diagnostic patch.
    pub patch: usize,
    /// Distance from the image center to patch centers.
    pub ring_radius: f64,
    /// Max per-image patch offset in pixels along each axis.
    pub jitter: usize,
    pub patch_level: f64,
    pub background_level: f64,
    pub cue_level: f64,
    pub rho_spur: f64,
    /// Pixel noise std.
    pub noise: f64,
    /// Std of the human-map bump.
    pub map_sigma: f64,
    /// Bump support: the patch box dilated by `floor(map_truncate * map_sigma)`.
    /// At most 3.
    pub map_truncate: f64,
    pub train: usize,
    pub val: usize,
    /// Rater maps generated per validation image.
    pub raters: usize,
    /// Multiplicative per-pixel gain noise of rater maps.
    pub rater_noise: f64,
    /// Std of the additive half-normal click noise spread over rater maps.
    pub rater_background: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 32,
            classes: 10,
            patch: 4,
            ring_radius: 9.0,
            jitter: 1,
            patch_level: 0.9,
            background_level: 0.3,
            cue_level: 0.9,
            rho_spur: 0.9,
            noise: 0.05,
            map_sigma: 1.5,
            map_truncate: 3.0,
            train: 500,
            val: 200,
            raters: 10,
            rater_noise: 0.5,
            rater_background: 0.05,
            seed: 0,
        }
    }
}

/// Cue cells are 2x2 squares tiling the top-left 8x8 corner.
const CUE_CELL: usize = 2;
const CUE_EXTENT: usize = 8;

impl SyntheticSpec {
    /// Animal classes are the lower half of the label range.
    pub fn animal_classes(&self) -> Vec<usize> {
        (0..self.classes / 2).collect()
    }

    /// Unjittered top-left corner of class `c`'s patch.
    pub fn patch_origin(&self, c: usize) -> (isize, isize) {
        let theta = std::f64::consts::TAU * c as f64 / self.classes as f64;
        let center = self.size as f64 / 2.0;
        let half = self.patch as f64 / 2.0;
        (
            (center + self.ring_radius * theta.sin() - half).round() as isize,
            (center + self.ring_radius * theta.cos() - half).round() as isize,
        )
    }

    fn cue_cell(&self, c: usize) -> (usize, usize) {
        let per_row = CUE_EXTENT / CUE_CELL;
        (CUE_CELL * (c / per_row), CUE_CELL * (c % per_row))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Spec(m));
        let per_row = CUE_EXTENT / CUE_CELL;
        if self.classes < 2 || self.classes > per_row * per_row {
            return bad(format!("classes must be in 2..={}", per_row * per_row));
        }
        if self.size < 16 || self.patch == 0 {
            return bad("image size must be >= 16 and patch >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.rho_spur) {
            return bad(format!("rho_spur {} outside [0, 1]", self.rho_spur));
        }
        let nonneg = [
            self.noise,
            self.map_sigma,
            self.rater_noise,
            self.rater_background,
            self.ring_radius,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("noise, sigma, and radius must be finite and >= 0".into());
        }
        if !(0.0..=3.0).contains(&self.map_truncate) {
            return bad(format!("map_truncate {} outside [0, 3]", self.map_truncate));
        }
        if self.train == 0 || self.val == 0 {
            return bad("train and val counts must be positive".into());
        }
        let j = self.jitter as isize;
        let (s, p) = (self.size as isize, self.patch as isize);
        for c in 0..self.classes {
            let (r, col) = self.patch_origin(c);
            if r - j < 0 || col - j < 0 || r + j + p > s || col + j + p > s {
                return bad(format!("patch of class {c} leaves the image"));
            }
            let e = CUE_EXTENT as isize;
            if r - j < e && col - j < e {
                return bad(format!("patch of class {c} overlaps the corner cue area"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: String,
    pub label: usize,
    /// Top-left corner of the drawn patch.
    pub patch: (usize, usize),
    /// Class whose corner cell is lit.
    pub cue_class: usize,
    pub image: String,
    pub map: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub spec: SyntheticSpec,
    pub animal_classes: Vec<usize>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub index: DatasetIndex,
    pub train: Vec<TrainSample>,
    pub val: Vec<TrainSample>,
    /// Noisy rater maps for every validation image.
    pub raters: Vec<ImageRaters>,
}

fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

fn human_map(spec: &SyntheticSpec, id: &str, origin: (usize, usize)) -> ImportanceMap {
    let s = spec.size;
    let half = (spec.patch as f64 - 1.0) / 2.0;
    let (cr, cc) = (origin.0 as f64 + half, origin.1 as f64 + half);
    let reach = (spec.map_truncate * spec.map_sigma).floor() as isize;
    let (r0, c0) = (origin.0 as isize - reach, origin.1 as isize - reach);
    let (r1, c1) = (
        (origin.0 + spec.patch) as isize - 1 + reach,
        (origin.1 + spec.patch) as isize - 1 + reach,
    );
    let mut values = vec![0.0; s * s];
    for r in 0..s {
        for c in 0..s {
            let (ri, ci) = (r as isize, c as isize);
            if ri < r0 || ri > r1 || ci < c0 || ci > c1 {
                continue;
            }
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            let v = if spec.map_sigma == 0.0 {
                let inside = ri >= origin.0 as isize
                    && ci >= origin.1 as isize
                    && ri < (origin.0 + spec.patch) as isize
                    && ci < (origin.1 + spec.patch) as isize;
                f64::from(u8::from(inside))
            } else {
                (-d2 / (2.0 * spec.map_sigma * spec.map_sigma)).exp()
            };
            values[r * s + c] = v as f32 as f64;
        }
    }
    ImportanceMap::new(id, s, s, values).expect("bump values are finite and >= 0")
}

fn draw_sample(spec: &SyntheticSpec, id: String, split: &str, index: u64) -> (SampleRecord, TrainSample) {
    let mut rng = seeding::stream(spec.seed, index);
    let s = spec.size;
    let label = rng.random_range(0..spec.classes);
    let cue_class = if rng.random::<f64>() < spec.rho_spur {
        label
    } else {
        rng.random_range(0..spec.classes)
    };
    let j = spec.jitter as isize;
    let (pr, pc) = spec.patch_origin(label);
    let origin = (
        (pr + rng.random_range(-(j as i64)..=j as i64) as isize) as usize,
        (pc + rng.random_range(-(j as i64)..=j as i64) as isize) as usize,
    );
    let noise = Normal::new(0.0, spec.noise).expect("noise std validated");
    let mut values: Vec<f64> = (0..s * s)
        .map(|_| spec.background_level + noise.sample(&mut rng))
        .collect();
    for r in origin.0..origin.0 + spec.patch {
        for c in origin.1..origin.1 + spec.patch {
            values[r * s + c] += spec.patch_level - spec.background_level;
        }
    }
    let (qr, qc) = spec.cue_cell(cue_class);
    for r in qr..qr + CUE_CELL {
        for c in qc..qc + CUE_CELL {
            values[r * s + c] += spec.cue_level - spec.background_level;
        }
    }
    let values: Vec<f64> = values.into_iter().map(quantize16).collect();
    let map = human_map(spec, &id, origin);
    let record = SampleRecord {
        id: id.clone(),
        split: split.to_string(),
        label,
        patch: origin,
        cue_class,
        image: format!("images/{id}.png"),
        map: format!("maps/{id}.fmap"),
    };
    let sample = TrainSample {
        id,
        image: Tensor::new(vec![1, s, s], values).expect("pixels are finite"),
        label,
        human_map: Some(map),
    };
    (record, sample)
}

/// Rater maps: the template shifted by up to one pixel per axis, times
/// per-pixel gains `max(0, 1 + noise * N(0, 1))`, plus `|background * N(0, 1)|`.
/// One stream per image.
pub fn generate_rater_pool(
    templates: &[&ImportanceMap],
    raters: usize,
    noise: f64,
    background: f64,
    seed: u64,
) -> Vec<ImageRaters> {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("std is finite");
    let click = Normal::new(0.0, background.max(0.0)).expect("std is finite");
    templates
        .iter()
        .map(|t| {
            let mut rng = seeding::keyed(seed, &format!("raters/{}", t.image_id));
            let (w, h) = (t.width() as i64, t.height() as i64);
            let raters = (0..raters)
                .map(|k| {
                    let dr = rng.random_range(-1..=1i64);
                    let dc = rng.random_range(-1..=1i64);
                    let mut values = Vec::with_capacity(t.values().len());
                    for r in 0..h {
                        for c in 0..w {
                            let (sr, sc) = (r - dr, c - dc);
                            let v = if (0..h).contains(&sr) && (0..w).contains(&sc) {
                                t.get(sr as usize, sc as usize)
                            } else {
                                0.0
                            };
                            let gain = (1.0 + normal.sample(&mut rng)).max(0.0);
                            let extra = click.sample(&mut rng).abs();
                            values.push((v * gain + extra) as f32 as f64);
                        }
                    }
                    RaterMap {
                        rater_id: format!("r{k:02}"),
                        map: ImportanceMap::new(t.image_id.clone(), t.width(), t.height(), values)
                            .expect("clamped values are valid"),
                    }
                })
                .collect();
            ImageRaters {
                image_id: t.image_id.clone(),
                raters,
            }
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut samples = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..spec.train {
        let (r, s) = draw_sample(spec, format!("train_{i:05}"), "train", i as u64);
        samples.push(r);
        train.push(s);
    }
    for i in 0..spec.val {
        let (r, s) = draw_sample(spec, format!("val_{i:05}"), "val", (spec.train + i) as u64);
        samples.push(r);
        val.push(s);
    }
    let templates: Vec<&ImportanceMap> = val.iter().filter_map(|s| s.human_map.as_ref()).collect();
    let raters = generate_rater_pool(
        &templates,
        spec.raters,
        spec.rater_noise,
        spec.rater_background,
        spec.seed,
    );
    Ok(SyntheticDataset {
        index: DatasetIndex {
            spec: spec.clone(),
            animal_classes: spec.animal_classes(),
            samples,
        },
        train,
        val,
        raters,
    })
}

/// Layout: `dataset.json`, `images/<id>.png` (16-bit), `maps/<id>.fmap`,
/// and `raters/<id>/<rater>.fmap` for validation images.
pub fn save_dataset(dir: &Path, data: &SyntheticDataset) -> Result<()> {
    write_json(&dir.join("dataset.json"), &data.index)?;
    for (rec, s) in data.index.samples.iter().zip(data.train.iter().chain(&data.val)) {
        let sh = s.image.shape();
        let img = GrayImage::new(sh[2], sh[1], s.image.values().to_vec()).expect("pixels are finite");
        write_gray_png(&dir.join(&rec.image), &img, true)?;
        if let Some(m) = &s.human_map {
            write_fmap(&dir.join(&rec.map), m)?;
        }
    }
    for g in &data.raters {
        for r in &g.raters {
            write_fmap(
                &dir.join("raters")
                    .join(&g.image_id)
                    .join(format!("{}.fmap", r.rater_id)),
                &r.map,
            )?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let index: DatasetIndex = read_json(&dir.join("dataset.json"))?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut raters = Vec::new();
    for rec in &index.samples {
        let image = super::read_image(&dir.join(&rec.image))?;
        let mut map = super::read_fmap(&dir.join(&rec.map))?;
        map.image_id = rec.id.clone();
        let sample = TrainSample {
            id: rec.id.clone(),
            image,
            label: rec.label,
            human_map: Some(map),
        };
        match rec.split.as_str() {
            "train" => train.push(sample),
            "val" => {
                let rdir = dir.join("raters").join(&rec.id);
                if rdir.is_dir() {
                    raters.push(read_rater_dir(&rdir, &rec.id)?);
                }
                val.push(sample)
            }
            other => return Err(DataError::Malformed(format!("unknown split {other:?} for {}", rec.id))),
        }
    }
    Ok(SyntheticDataset {
        index,
        train,
        val,
        raters,
    })
}

/// Reads every `.fmap` in `dir` (sorted by name) as one image's raters.
pub fn read_rater_dir(dir: &Path, image_id: &str) -> Result<ImageRaters> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(super::io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fmap"))
        .collect();
    paths.sort();
    let mut raters = Vec::new();
    for p in paths {
        let mut map = super::read_fmap(&p)?;
        let rater_id = std::mem::replace(&mut map.image_id, image_id.to_string());
        raters.push(RaterMap { rater_id, map });
    }
    Ok(ImageRaters {
        image_id: image_id.to_string(),
        raters,
    })
}
