//! Human-alignment scoring: rank correlation, split-half ceiling,
//! ceiling-normalized alignment with bootstrap spread, and the center-bias
//! baseline.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::{ImportanceMap, RaterMap};
use crate::pyramid::{self, PyramidError};
use crate::seeding;

pub const DEFAULT_SPLITS: usize = 1000;
pub const DEFAULT_BOOTSTRAP: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("rank correlation undefined for a constant input")]
    Constant,
    #[error("no image has at least 2 raters")]
    NoRaterPairs,
    #[error("image sets differ: missing from model {missing_in_model:?}, missing from human {missing_in_human:?}")]
    MismatchedImages {
        missing_in_model: Vec<String>,
        missing_in_human: Vec<String>,
    },
    #[error("no images to score")]
    Empty,
    #[error("ceiling must be non-zero and finite, got {0}")]
    BadCeiling(f64),
    #[error("scale factor must be 1, 4 or 16, got {0}")]
    BadScale(usize),
    #[error("map {0}: dimensions disagree")]
    DimMismatch(String),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

/// Average-tie (fractional) ranks, starting at 1.
pub fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricsError::Constant);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of fractional ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::TooShort(a.len()));
    }
    pearson(&fractional_ranks(a), &fractional_ranks(b))
}

/// All rater maps for one image.
#[derive(Debug, Clone)]
pub struct ImageRaters {
    pub image_id: String,
    pub raters: Vec<RaterMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeilingEstimate {
    pub ceiling: f64,
    pub n_splits: usize,
    pub n_images: usize,
    /// Images with fewer than 2 raters.
    pub excluded_images: Vec<String>,
    /// (split, image) pairs skipped because a half-mean was constant.
    pub skipped_constant: usize,
}

/// Splits `n` shuffled raters into halves of `floor(n/2)` and `ceil(n/2)`.
fn split_half_score(group: &ImageRaters, rng: &mut seeding::Rng) -> Result<f64, MetricsError> {
    let mut order: Vec<usize> = (0..group.raters.len()).collect();
    order.shuffle(rng);
    let half = order.len() / 2;
    let pick = |ids: &[usize]| {
        let maps: Vec<&ImportanceMap> = ids.iter().map(|&i| &group.raters[i].map).collect();
        ImportanceMap::mean_of(group.image_id.clone(), &maps)
            .ok_or_else(|| MetricsError::DimMismatch(group.image_id.clone()))
    };
    let a = pick(&order[..half])?;
    let b = pick(&order[half..])?;
    spearman(a.values(), b.values())
}

/// Rater maps downsampled by `factor` (1, 4 or 16), so a ceiling can be
/// estimated at the same scale as the alignment it normalizes.
pub fn downscale_raters(groups: &[ImageRaters], factor: usize) -> Result<Vec<ImageRaters>, MetricsError> {
    if ![1, 4, 16].contains(&factor) {
        return Err(MetricsError::BadScale(factor));
    }
    groups
        .iter()
        .map(|g| {
            let raters = g
                .raters
                .iter()
                .map(|r| {
                    Ok(RaterMap {
                        rater_id: r.rater_id.clone(),
                        map: pyramid::downscale(&r.map, factor)?,
                    })
                })
                .collect::<Result<_, MetricsError>>()?;
            Ok(ImageRaters {
                image_id: g.image_id.clone(),
                raters,
            })
        })
        .collect()
}

/// Mean split-half rank correlation. Each split shuffles every image's
/// raters with its own stream, scores the two half-mean maps per image,
/// and averages over images; the result averages over splits.
pub fn interrater_ceiling(groups: &[ImageRaters], n_splits: usize, seed: u64) -> Result<CeilingEstimate, MetricsError> {
    let (usable, excluded): (Vec<&ImageRaters>, Vec<&ImageRaters>) = groups.iter().partition(|g| g.raters.len() >= 2);
    if usable.is_empty() || n_splits == 0 {
        return Err(MetricsError::NoRaterPairs);
    }
    let per_split: Vec<(f64, usize, usize)> = (0..n_splits)
        .into_par_iter()
        .map(|s| {
            let mut rng = seeding::stream(seed, s as u64);
            let mut total = 0.0;
            let mut count = 0;
            let mut skipped = 0;
            for g in &usable {
                match split_half_score(g, &mut rng) {
                    Ok(r) => {
                        total += r;
                        count += 1;
                    }
                    Err(MetricsError::Constant) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((total, count, skipped))
        })
        .collect::<Result<_, _>>()?;
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (t, c, s) in per_split {
        skipped += s;
        if c > 0 {
            sum += t / c as f64;
            used += 1;
        }
    }
    if used == 0 {
        return Err(MetricsError::Constant);
    }
    Ok(CeilingEstimate {
        ceiling: sum / used as f64,
        n_splits,
        n_images: usable.len(),
        excluded_images: excluded.iter().map(|g| g.image_id.clone()).collect(),
        skipped_constant: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Raw rho per image.
    pub per_image: BTreeMap<String, f64>,
    pub ceiling: f64,
    pub raw_mean: f64,
    pub normalized_mean: f64,
    pub bootstrap_std: f64,
    pub scale_factor: usize,
    /// Images dropped because either map was constant.
    pub excluded_constant: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentOptions {
    pub scale_factor: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        Self {
            scale_factor: 1,
            bootstrap: DEFAULT_BOOTSTRAP,
            seed: 0,
        }
    }
}

fn check_ceiling(c: f64) -> Result<(), MetricsError> {
    if c == 0.0 || !c.is_finite() {
        return Err(MetricsError::BadCeiling(c));
    }
    Ok(())
}

fn index_by_id(maps: &[ImportanceMap]) -> BTreeMap<&str, &ImportanceMap> {
    maps.iter().map(|m| (m.image_id.as_str(), m)).collect()
}

/// Std of bootstrap means of `scores / ceiling` (population std over
/// replicates).
pub fn bootstrap_std(scores: &[f64], ceiling: f64, replicates: usize, seed: u64) -> f64 {
    if scores.is_empty() || replicates == 0 {
        return 0.0;
    }
    let n = scores.len();
    let mut rng = seeding::root(seed);
    let means: Vec<f64> = (0..replicates)
        .map(|_| {
            let s: f64 = (0..n).map(|_| scores[rng.random_range(0..n)]).sum();
            s / n as f64 / ceiling
        })
        .collect();
    let mu = means.iter().sum::<f64>() / replicates as f64;
    (means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / replicates as f64).sqrt()
}

/// Per-image rank correlation between human and model maps, normalized by
/// the inter-rater ceiling. Both sides must cover the same image ids.
pub fn alignment_score(
    human: &[ImportanceMap],
    model: &[ImportanceMap],
    ceiling: f64,
    opts: AlignmentOptions,
) -> Result<AlignmentReport, MetricsError> {
    check_ceiling(ceiling)?;
    if ![1, 4, 16].contains(&opts.scale_factor) {
        return Err(MetricsError::BadScale(opts.scale_factor));
    }
    let h = index_by_id(human);
    let m = index_by_id(model);
    let hk: BTreeSet<&str> = h.keys().copied().collect();
    let mk: BTreeSet<&str> = m.keys().copied().collect();
    if hk != mk {
        return Err(MetricsError::MismatchedImages {
            missing_in_model: hk.difference(&mk).map(|s| s.to_string()).collect(),
            missing_in_human: mk.difference(&hk).map(|s| s.to_string()).collect(),
        });
    }
    if hk.is_empty() {
        return Err(MetricsError::Empty);
    }
    let ids: Vec<&str> = hk.into_iter().collect();
    let scored: Vec<(String, Option<f64>)> = ids
        .par_iter()
        .map(|id| {
            let (hm, mm) = (h[id], m[id]);
            if hm.width() != mm.width() || hm.height() != mm.height() {
                return Err(MetricsError::DimMismatch(id.to_string()));
            }
            let hs = pyramid::downscale(hm, opts.scale_factor)?;
            let ms = pyramid::downscale(mm, opts.scale_factor)?;
            match spearman(hs.values(), ms.values()) {
                Ok(r) => Ok((id.to_string(), Some(r))),
                Err(MetricsError::Constant) => Ok((id.to_string(), None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, _>>()?;
    let mut per_image = BTreeMap::new();
    let mut excluded = Vec::new();
    for (id, r) in scored {
        match r {
            Some(r) => {
                per_image.insert(id, r);
            }
            None => excluded.push(id),
        }
    }
    if per_image.is_empty() {
        return Err(MetricsError::Constant);
    }
    let scores: Vec<f64> = per_image.values().copied().collect();
    let raw_mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(AlignmentReport {
        ceiling,
        raw_mean,
        normalized_mean: raw_mean / ceiling,
        bootstrap_std: bootstrap_std(&scores, ceiling, opts.bootstrap, opts.seed),
        scale_factor: opts.scale_factor,
        per_image,
        excluded_constant: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterBias {
    pub raw: f64,
    pub normalized: f64,
    pub excluded_constant: Vec<String>,
}

/// Leave-one-out baseline: each held-out map is scored against the mean of
/// all other maps.
pub fn center_bias_baseline(human: &[ImportanceMap], ceiling: f64) -> Result<CenterBias, MetricsError> {
    check_ceiling(ceiling)?;
    if human.len() < 2 {
        return Err(MetricsError::TooShort(human.len()));
    }
    let (w, hgt) = (human[0].width(), human[0].height());
    if let Some(bad) = human.iter().find(|m| m.width() != w || m.height() != hgt) {
        return Err(MetricsError::DimMismatch(bad.image_id.clone()));
    }
    let mut total = vec![0.0; w * hgt];
    for m in human {
        for (t, v) in total.iter_mut().zip(m.values()) {
            *t += v;
        }
    }
    let k = (human.len() - 1) as f64;
    let mut sum = 0.0;
    let mut count = 0;
    let mut excluded = Vec::new();
    for m in human {
        let others: Vec<f64> = total.iter().zip(m.values()).map(|(t, v)| (t - v) / k).collect();
        match spearman(&others, m.values()) {
            Ok(r) => {
                sum += r;
                count += 1;
            }
            Err(MetricsError::Constant) => excluded.push(m.image_id.clone()),
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(MetricsError::Constant);
    }
    let raw = sum / count as f64;
    Ok(CenterBias {
        raw,
        normalized: raw / ceiling,
        excluded_constant: excluded,
    })
}
