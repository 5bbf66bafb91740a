//! Masked stimuli: phase-scrambled backgrounds with the most important
//! region of each image revealed at log-spaced pixel budgets.

use std::collections::BTreeSet;

use rand::Rng as _;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::dataio::{Category, RevealLevel, StimulusEntry, StimulusManifest};
use crate::diffcore::Tensor;
use crate::explain::ImportanceMap;
use crate::seeding::{self, Rng};

pub const DEFAULT_LEVELS: usize = 10;
pub const DEFAULT_OUTPUT_SIZE: usize = 256;
pub const IMAG_TOLERANCE: f64 = 1e-9;
/// Luminance weights for RGB to gray.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error, PartialEq)]
pub enum StimulusError {
    #[error("non-finite pixel at index {0}")]
    NonFinite(usize),
    #[error("image must be [1, H, W] or [3, H, W], got {0:?}")]
    Channels(Vec<usize>),
    #[error("k = {k} outside 1..={pixels}")]
    BadBudget { k: usize, pixels: usize },
    #[error("importance map {0} has no positive pixel")]
    EmptyMap(String),
    #[error("no maps to derive levels from")]
    NoMaps,
    #[error("need at least one level")]
    NoLevels,
    #[error("mask is empty")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("imaginary residue {0:e} after inverse transform")]
    Residue(f64),
    #[error("temperature must be finite and >= 0, got {0}")]
    BadTemperature(f64),
}

/// Single-channel image, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, StimulusError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(StimulusError::Dims(format!(
                "{width}x{height} with {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(StimulusError::NonFinite(i));
        }
        Ok(Self { width, height, values })
    }

    /// Grayscale of a `[C, H, W]` tensor; three channels use [`LUMA`].
    pub fn from_tensor(image: &Tensor) -> Result<Self, StimulusError> {
        let s = image.shape();
        if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
            return Err(StimulusError::Channels(s.to_vec()));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let v = image.values();
        let values = if s[0] == 1 {
            v.to_vec()
        } else {
            (0..plane)
                .map(|i| LUMA[0] * v[i] + LUMA[1] * v[plane + i] + LUMA[2] * v[2 * plane + i])
                .collect()
        };
        Self::new(w, h, values)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Nearest-neighbour resample.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for r in 0..height {
            let sr = r * self.height / height;
            for c in 0..width {
                values.push(self.get(sr, c * self.width / width));
            }
        }
        Self { width, height, values }
    }

    /// Clamps to [0, 1] and quantizes to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn from_indices(width: usize, height: usize, idx: &[usize]) -> Self {
        let mut bits = vec![false; width * height];
        for &i in idx {
            bits[i] = true;
        }
        Self { width, height, bits }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// `(row_min, row_max, col_min, col_max)`, inclusive.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, x)| **x) {
            let (r, c) = (i / self.width, i % self.width);
            b = Some(match b {
                None => (r, r, c, c),
                Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
            });
        }
        b
    }
}

fn fft2(data: &mut [Complex64], width: usize, height: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for r in data.chunks_mut(width) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            column[r] = data[r * width + c];
        }
        col.process(&mut column);
        for r in 0..height {
            data[r * width + c] = column[r];
        }
    }
}

/// Unnormalized 2-D DFT of a real image.
pub fn dft2(image: &GrayImage) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = image.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut data, image.width, image.height, false);
    data
}

/// Adds a random phase field with `phi(-u, -v) = -phi(u, v)` to the image
/// spectrum. Self-conjugate bins (DC and Nyquist) are left untouched, so
/// the result is real and keeps the magnitude spectrum and mean.
pub fn phase_scramble(image: &GrayImage, rng: &mut Rng) -> Result<GrayImage, StimulusError> {
    phase_scramble_with_residue(image, rng).map(|(img, _)| img)
}

/// [`phase_scramble`] that also returns the largest imaginary part left
/// after the inverse transform, relative to the pixel count.
pub fn phase_scramble_with_residue(image: &GrayImage, rng: &mut Rng) -> Result<(GrayImage, f64), StimulusError> {
    if let Some(i) = image.values.iter().position(|v| !v.is_finite()) {
        return Err(StimulusError::NonFinite(i));
    }
    let (w, h) = (image.width, image.height);
    let mut spec = dft2(image);
    for u in 0..h {
        for v in 0..w {
            let (cu, cv) = ((h - u) % h, (w - v) % w);
            let i = u * w + v;
            let j = cu * w + cv;
            // Visit each conjugate pair once, from its lower index.
            if j <= i {
                continue;
            }
            let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let rot = Complex64::from_polar(1.0, phi);
            spec[i] *= rot;
            spec[j] *= rot.conj();
        }
    }
    fft2(&mut spec, w, h, true);
    let n = (w * h) as f64;
    let residue = spec.iter().map(|c| c.im.abs()).fold(0.0, f64::max) / n;
    if residue > IMAG_TOLERANCE {
        return Err(StimulusError::Residue(residue));
    }
    Ok((GrayImage::new(w, h, spec.iter().map(|c| c.re / n).collect())?, residue))
}

fn neighbors(i: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((i / width) as isize, (i % width) as isize);
    (-1..=1isize)
        .flat_map(move |dr| (-1..=1isize).map(move |dc| (r + dr, c + dc)))
        .filter(move |&(rr, cc)| {
            (rr, cc) != (r, c) && rr >= 0 && cc >= 0 && rr < height as isize && cc < width as isize
        })
        .map(move |(rr, cc)| rr as usize * width + cc as usize)
}

/// Order in which pixels join the region, seeded on the argmax pixel.
/// Each step draws from the 8-connected frontier with weights
/// `exp((v - v_max) / tau)`; `tau = 0` picks the best pixel, lowest index
/// on ties. Every prefix of the result is itself a valid region.
pub fn flood_fill_order(map: &ImportanceMap, k: usize, tau: f64, rng: &mut Rng) -> Result<Vec<usize>, StimulusError> {
    let (w, h) = (map.width(), map.height());
    let pixels = w * h;
    if k == 0 || k > pixels {
        return Err(StimulusError::BadBudget { k, pixels });
    }
    if !tau.is_finite() || tau < 0.0 {
        return Err(StimulusError::BadTemperature(tau));
    }
    let v = map.values();
    let mut inside = vec![false; pixels];
    let mut frontier = BTreeSet::new();
    let mut order = Vec::with_capacity(k);
    let mut weights = Vec::new();
    let mut pick = map.argmax();
    loop {
        inside[pick] = true;
        frontier.remove(&pick);
        order.push(pick);
        if order.len() == k {
            return Ok(order);
        }
        frontier.extend(neighbors(pick, w, h).filter(|&n| !inside[n]));
        let cand: Vec<usize> = frontier.iter().copied().collect();
        let top = cand.iter().map(|&i| v[i]).fold(f64::NEG_INFINITY, f64::max);
        pick = if tau == 0.0 {
            *cand.iter().find(|&&i| v[i] == top).expect("frontier is non-empty")
        } else {
            weights.clear();
            weights.extend(cand.iter().map(|&i| ((v[i] - top) / tau).exp()));
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut chosen = *cand.last().expect("frontier is non-empty");
            for (&i, &wt) in cand.iter().zip(&weights) {
                if u < wt {
                    chosen = i;
                    break;
                }
                u -= wt;
            }
            chosen
        };
    }
}

pub fn flood_fill_mask(map: &ImportanceMap, k: usize, tau: f64, rng: &mut Rng) -> Result<Mask, StimulusError> {
    let order = flood_fill_order(map, k, tau, rng)?;
    Ok(Mask::from_indices(map.width(), map.height(), &order))
}

/// Default temperature for a map: a tenth of its peak importance.
pub fn default_temperature(map: &ImportanceMap) -> f64 {
    0.1 * map.max()
}

/// `n` fractions log-spaced from 0.01 to 1.
pub fn reveal_fractions(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![1.0],
        _ => (0..n)
            .map(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (n - 1) as f64))
            .collect(),
    }
}

/// Levels whose budgets `k = round(fraction * P)`, with `P` the smallest
/// importance support in the dataset, so every image can reveal `k` pixels.
pub fn build_levels(maps: &[&ImportanceMap], n_levels: usize) -> Result<Vec<RevealLevel>, StimulusError> {
    if n_levels == 0 {
        return Err(StimulusError::NoLevels);
    }
    let mut p = usize::MAX;
    for m in maps {
        let s = m.support();
        if s == 0 {
            return Err(StimulusError::EmptyMap(m.image_id.clone()));
        }
        p = p.min(s);
    }
    if maps.is_empty() {
        return Err(StimulusError::NoMaps);
    }
    Ok(reveal_fractions(n_levels)
        .into_iter()
        .enumerate()
        .map(|(index, fraction)| RevealLevel {
            index,
            fraction,
            k: ((fraction * p as f64).round() as usize).max(1),
        })
        .collect())
}

/// Pastes the masked part of `image` over `background`, shifted so the
/// mask's bounding-box center lands on the image center, then resamples to
/// `out_size` if given.
pub fn compose_stimulus(
    image: &GrayImage,
    mask: &Mask,
    background: &GrayImage,
    out_size: Option<usize>,
) -> Result<GrayImage, StimulusError> {
    let (w, h) = (image.width, image.height);
    if (mask.width, mask.height) != (w, h) || (background.width, background.height) != (w, h) {
        return Err(StimulusError::Dims(format!(
            "image {w}x{h}, mask {}x{}, background {}x{}",
            mask.width, mask.height, background.width, background.height
        )));
    }
    let (r0, r1, c0, c1) = mask.bbox().ok_or(StimulusError::EmptyMask)?;
    let shift = |lo: usize, hi: usize, n: usize| ((n as f64 - 1.0) / 2.0 - (lo + hi) as f64 / 2.0).round() as isize;
    let (dr, dc) = (shift(r0, r1, h), shift(c0, c1, w));
    let mut out = background.clone();
    for (i, _) in mask.bits.iter().enumerate().filter(|(_, b)| **b) {
        let r = (i / w) as isize + dr;
        let c = (i % w) as isize + dc;
        // The bounding box always fits after centering.
        debug_assert!(r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w);
        out.values[r as usize * w + c as usize] = image.values[i];
    }
    Ok(match out_size {
        Some(s) if (s, s) != (w, h) => out.resized(s, s),
        _ => out,
    })
}

/// One image to turn into stimuli.
#[derive(Debug, Clone)]
pub struct StimulusSource {
    pub image_id: String,
    pub image: GrayImage,
    pub map: ImportanceMap,
    pub category: Category,
}

#[derive(Debug, Clone)]
pub struct StimulusOptions {
    pub n_levels: usize,
    /// Temperature as a multiple of each map's peak importance.
    pub tau_scale: f64,
    pub out_size: Option<usize>,
    pub seed: u64,
}

impl Default for StimulusOptions {
    fn default() -> Self {
        Self {
            n_levels: DEFAULT_LEVELS,
            tau_scale: 0.1,
            out_size: Some(DEFAULT_OUTPUT_SIZE),
            seed: 0,
        }
    }
}

pub struct StimulusSet {
    pub manifest: StimulusManifest,
    /// Rendered images in manifest entry order.
    pub images: Vec<GrayImage>,
}

pub fn stimulus_path(image_id: &str, level: usize) -> String {
    format!("{image_id}_L{level:02}.png")
}

/// Renders every (image, level) pair. Per-image randomness comes from
/// `(seed, image_id)`, so output does not depend on thread scheduling.
pub fn generate_stimuli(sources: &[StimulusSource], opts: &StimulusOptions) -> Result<StimulusSet, StimulusError> {
    let maps: Vec<&ImportanceMap> = sources.iter().map(|s| &s.map).collect();
    let levels = build_levels(&maps, opts.n_levels)?;
    let k_max = levels.iter().map(|l| l.k).max().unwrap_or(1);
    let per_image: Vec<Vec<(StimulusEntry, GrayImage)>> = sources
        .par_iter()
        .map(|src| {
            if (src.map.width(), src.map.height()) != (src.image.width, src.image.height) {
                return Err(StimulusError::Dims(format!(
                    "map for {} does not match image",
                    src.image_id
                )));
            }
            let seed = seeding::derive(opts.seed, &src.image_id);
            let mut rng = seeding::root(seed);
            let background = phase_scramble(&src.image, &mut rng)?;
            let tau = opts.tau_scale * src.map.max();
            let order = flood_fill_order(&src.map, k_max, tau, &mut rng)?;
            levels
                .iter()
                .map(|l| {
                    let mask = Mask::from_indices(src.image.width, src.image.height, &order[..l.k]);
                    let img = compose_stimulus(&src.image, &mask, &background, opts.out_size)?;
                    let entry = StimulusEntry {
                        image_id: src.image_id.clone(),
                        level: l.index,
                        category: src.category,
                        seed,
                        path: stimulus_path(&src.image_id, l.index),
                    };
                    Ok((entry, img))
                })
                .collect()
        })
        .collect::<Result<_, StimulusError>>()?;
    let mut entries = Vec::new();
    let mut images = Vec::new();
    for (e, img) in per_image.into_iter().flatten() {
        entries.push(e);
        images.push(img);
    }
    Ok(StimulusSet {
        manifest: StimulusManifest { levels, entries },
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = seeding::root(seed);
        GrayImage::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = GrayImage::new(8, 6, vec![0.37; 48]).unwrap();
        let out = phase_scramble(&img, &mut seeding::root(1)).unwrap();
        for v in &out.values {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn scramble_keeps_mean_and_changes_pixels() {
        let img = random_image(9, 7, 3);
        let out = phase_scramble(&img, &mut seeding::root(4)).unwrap();
        assert!((out.mean() - img.mean()).abs() < 1e-9);
        assert!(out.values.iter().zip(&img.values).any(|(a, b)| (a - b).abs() > 1e-3));
    }

    #[test]
    fn scramble_rejects_non_finite() {
        let img = GrayImage {
            width: 2,
            height: 1,
            values: vec![0.0, f64::NAN],
        };
        assert_eq!(
            phase_scramble(&img, &mut seeding::root(0)),
            Err(StimulusError::NonFinite(1))
        );
    }

    #[test]
    fn fill_trivial_budgets() {
        let map = ImportanceMap::new("m", 3, 2, vec![0.1, 0.5, 0.2, 0.9, 0.3, 0.4]).unwrap();
        let one = flood_fill_mask(&map, 1, 0.05, &mut seeding::root(0)).unwrap();
        assert_eq!(one.bits, vec![false, false, false, true, false, false]);
        let all = flood_fill_mask(&map, 6, 0.05, &mut seeding::root(0)).unwrap();
        assert!(all.bits.iter().all(|b| *b));
        assert_eq!(
            flood_fill_mask(&map, 7, 0.05, &mut seeding::root(0)),
            Err(StimulusError::BadBudget { k: 7, pixels: 6 })
        );
    }

    #[test]
    fn greedy_follows_best_frontier_pixel() {
        // 1x5 strip: seed at 4 (0.9), then 3, then the 0.5 at 2 is not
        // adjacent until 3 joins.
        let map = ImportanceMap::new("m", 5, 1, vec![0.8, 0.1, 0.5, 0.2, 0.9]).unwrap();
        let order = flood_fill_order(&map, 5, 0.0, &mut seeding::root(0)).unwrap();
        assert_eq!(order, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn fractions() {
        assert_eq!(reveal_fractions(2), vec![0.01, 1.0]);
        let f = reveal_fractions(3);
        for (a, b) in f.iter().zip([0.01, 0.1, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let f = reveal_fractions(10);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
        for w in f.windows(3) {
            assert!((w[1] / w[0] - w[2] / w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn budgets_from_min_support() {
        let mut v = vec![0.0; 100 * 100];
        v[..5000].iter_mut().for_each(|x| *x = 1.0);
        let a = ImportanceMap::new("a", 100, 100, v).unwrap();
        let b = ImportanceMap::new("b", 100, 100, vec![1.0; 10000]).unwrap();
        let levels = build_levels(&[&a, &b], 3).unwrap();
        assert_eq!(levels[1].k, 500);
        assert_eq!(levels[2].k, 5000);
        let z = ImportanceMap::zeros("z", 4, 4);
        assert_eq!(build_levels(&[&a, &z], 3), Err(StimulusError::EmptyMap("z".into())));
    }

    #[test]
    fn full_mask_shows_original() {
        let img = random_image(6, 6, 1);
        let bg = random_image(6, 6, 2);
        let mask = Mask::from_indices(6, 6, &(0..36).collect::<Vec<_>>());
        assert_eq!(compose_stimulus(&img, &mask, &bg, None).unwrap(), img);
    }

    #[test]
    fn outside_mask_is_background() {
        let img = random_image(8, 8, 1);
        let bg = random_image(8, 8, 2);
        // a 2x2 block in the top-left corner moves to rows/cols 3..5
        let mask = Mask::from_indices(8, 8, &[0, 1, 8, 9]);
        let out = compose_stimulus(&img, &mask, &bg, None).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let inside = (3..5).contains(&r) && (3..5).contains(&c);
                let want = if inside { img.get(r - 3, c - 3) } else { bg.get(r, c) };
                assert_eq!(out.get(r, c), want);
            }
        }
        assert_eq!(
            compose_stimulus(&img, &Mask::from_indices(8, 8, &[]), &bg, None),
            Err(StimulusError::EmptyMask)
        );
    }

    #[test]
    fn luminance() {
        let t = Tensor::new(vec![3, 1, 1], vec![1.0, 0.5, 0.0]).unwrap();
        let g = GrayImage::from_tensor(&t).unwrap();
        assert!((g.values[0] - (0.299 + 0.5 * 0.587)).abs() < 1e-15);
    }

    #[test]
    fn resize_replicates() {
        let g = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(g.resized(4, 2).values, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
