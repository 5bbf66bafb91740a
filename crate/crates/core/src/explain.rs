//! Feature-importance maps and gradient saliency.

use thiserror::Error;

use crate::diffcore::{Graph, GraphError, Model, NodeId, ParamNodes, Tensor};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("map {image_id}: {message}")]
    InvalidMap { image_id: String, message: String },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite saliency for image {image_id}")]
    NonFinite { image_id: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Per-pixel non-negative importance, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub image_id: String,
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ImportanceMap {
    pub fn new(
        image_id: impl Into<String>,
        width: usize,
        height: usize,
        values: Vec<f64>,
    ) -> Result<Self, ExplainError> {
        let image_id = image_id.into();
        let invalid = |message: String| ExplainError::InvalidMap {
            image_id: image_id.clone(),
            message,
        };
        if width == 0 || height == 0 {
            return Err(invalid(format!("degenerate size {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(invalid(format!(
                "{width}x{height} map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!("value {} at index {i}", values[i])));
        }
        Ok(Self {
            image_id,
            width,
            height,
            values,
        })
    }

    /// Builds a map from arbitrary reals, clamping negatives (and `-0.0`)
    /// to zero.
    pub fn from_signed(
        image_id: impl Into<String>,
        width: usize,
        height: usize,
        values: Vec<f64>,
    ) -> Result<Self, ExplainError> {
        let values = values
            .into_iter()
            .map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
            .collect();
        Self::new(image_id, width, height, values)
    }

    pub fn zeros(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// The empty flag: no strictly positive pixel.
    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&v| v > 0.0)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Index of the largest value; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn support(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn transposed(&self) -> Self {
        let mut out = vec![0.0; self.values.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                out[c * self.height + r] = self.values[r * self.width + c];
            }
        }
        Self {
            image_id: self.image_id.clone(),
            width: self.height,
            height: self.width,
            values: out,
        }
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut out = self.values.clone();
        for row in out.chunks_mut(self.width) {
            row.reverse();
        }
        Self {
            values: out,
            ..self.clone()
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// `self * a + other * (1 - a)`; both maps must share dimensions.
    pub fn mix(&self, other: &ImportanceMap, a: f64) -> Self {
        Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + (1.0 - a) * y)
                .collect(),
            ..self.clone()
        }
    }

    /// Pixelwise mean of equally sized maps.
    pub fn mean_of(image_id: impl Into<String>, maps: &[&ImportanceMap]) -> Option<Self> {
        let first = maps.first()?;
        let mut acc = vec![0.0; first.values.len()];
        for m in maps {
            if m.width != first.width || m.height != first.height {
                return None;
            }
            for (a, v) in acc.iter_mut().zip(&m.values) {
                *a += v;
            }
        }
        let n = maps.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Some(Self {
            image_id: image_id.into(),
            width: first.width,
            height: first.height,
            values: acc,
        })
    }

    /// Shape `[1, 1, height, width]` tensor of the map values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.values.clone())
            .expect("map invariants guarantee a valid tensor")
    }
}

/// One participant's map for an image.
#[derive(Debug, Clone, PartialEq)]
pub struct RaterMap {
    pub rater_id: String,
    pub map: ImportanceMap,
}

/// Saliency node `[batch, 1, H, W]`: |d logit[target] / d x|, maxed over
/// channels. `x` must be a `[batch, C, H, W]` variable of `g`.
pub fn saliency_node(
    g: &mut Graph,
    model: &Model,
    params: &ParamNodes,
    x: NodeId,
    targets: &[usize],
) -> Result<NodeId, ExplainError> {
    let logits = model.forward(g, params, x)?;
    saliency_from_logits(g, x, logits, targets)
}

/// Saliency for an already built `logits` node computed from `x`.
pub fn saliency_from_logits(
    g: &mut Graph,
    x: NodeId,
    logits: NodeId,
    targets: &[usize],
) -> Result<NodeId, ExplainError> {
    let shape = g.shape(logits).to_vec();
    let (batch, classes) = (shape[0], shape[1]);
    if targets.len() != batch {
        return Err(GraphError::Shape(format!("{} targets for batch of {batch}", targets.len())).into());
    }
    let mut onehot = vec![0.0; batch * classes];
    for (b, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(ExplainError::TargetOutOfRange { target: t, classes });
        }
        onehot[b * classes + t] = 1.0;
    }
    let sel = g.constant(Tensor::new(shape, onehot)?);
    let picked = g.mul(logits, sel)?;
    let total = g.sum(picked);
    let grad = g.grad(total, &[x])?[0];
    let mag = g.abs(grad);
    Ok(g.max_along(mag, 1)?)
}

/// Saliency of one `[H, W, C]` image for `target_class`.
pub fn saliency(
    model: &Model,
    image: &Tensor,
    target_class: usize,
    image_id: &str,
) -> Result<ImportanceMap, ExplainError> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(GraphError::Shape(format!("expected [H, W, C] image, got {s:?}")).into());
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut chw = vec![0.0; h * w * c];
    for (i, &v) in image.values().iter().enumerate() {
        let (p, ch) = (i / c, i % c);
        chw[ch * h * w + p] = v;
    }
    let x = Tensor::new(vec![1, c, h, w], chw)?;
    Ok(saliency_batch(model, &x, &[target_class], &[image_id.to_string()])?.remove(0))
}

/// Saliency maps for a `[batch, C, H, W]` tensor.
pub fn saliency_batch(
    model: &Model,
    x: &Tensor,
    targets: &[usize],
    ids: &[String],
) -> Result<Vec<ImportanceMap>, ExplainError> {
    let mut g = Graph::new();
    let params = model.bind_frozen(&mut g);
    let xn = g.variable(x.clone());
    let sal = saliency_node(&mut g, model, &params, xn, targets)?;
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let v = g.value(sal).values();
    ids.iter()
        .enumerate()
        .map(|(b, id)| {
            let vals = v[b * h * w..(b + 1) * h * w].to_vec();
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(ExplainError::NonFinite { image_id: id.clone() });
            }
            ImportanceMap::new(id.clone(), w, h, vals)
        })
        .collect()
}

/// Index into a half-sample symmetric extension (`ba|abcd|dc`).
fn symmetric_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let j = i.rem_euclid(period);
    if j >= n as isize {
        (period - 1 - j) as usize
    } else {
        j as usize
    }
}

/// Normalized 1-D Gaussian taps for radius `ceil(6 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (6.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian blur for display. Symmetric border extension keeps the total
/// mass unchanged.
pub fn smooth_for_viz(map: &ImportanceMap, sigma: f64) -> Result<ImportanceMap, ExplainError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(ExplainError::InvalidMap {
            image_id: map.image_id.clone(),
            message: format!("sigma must be >= 0, got {sigma}"),
        });
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (map.width, map.height);
    let src = &map.values;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = symmetric_index(x as isize + t as isize - r, w);
                s += kv * src[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = symmetric_index(y as isize + t as isize - r, h);
                s += kv * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    ImportanceMap::from_signed(map.image_id.clone(), w, h, out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::diffcore::{Architecture, LayerSpec};

    fn linear_model(weights: &[f64], hw: (usize, usize, usize)) -> Model {
        let (h, w, c) = hw;
        let arch = Architecture {
            input: vec![c, h, w],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: h * w * c,
                    outputs: 2,
                },
            ],
        };
        let mut wt = vec![0.0; h * w * c * 2];
        for (i, &v) in weights.iter().enumerate() {
            wt[i * 2] = v;
            wt[i * 2 + 1] = -0.5 * v;
        }
        let mut p = BTreeMap::new();
        p.insert("layer1.weight".into(), Tensor::new(vec![h * w * c, 2], wt).unwrap());
        p.insert("layer1.bias".into(), Tensor::full(&[1, 2], 0.3));
        Model::from_params(arch, p).unwrap()
    }

    #[test]
    fn linear_model_saliency_is_abs_weight_maxed_over_channels() {
        // flattened CHW weights for a 2x2 image with 2 channels
        let w = [1.0, -2.0, 0.5, 0.0, -3.0, 1.0, 0.25, -0.1];
        let m = linear_model(&w, (2, 2, 2));
        let img = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let s = saliency(&m, &img, 0, "lin").unwrap();
        assert_eq!(s.values(), &[3.0, 2.0, 0.5, 0.1]);
    }

    #[test]
    fn constant_model_gives_empty_map() {
        let m = linear_model(&[0.0; 4], (2, 2, 1));
        let img = Tensor::new(vec![2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let s = saliency(&m, &img, 1, "c").unwrap();
        assert!(s.is_empty());
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_out_of_range() {
        let m = linear_model(&[1.0; 4], (2, 2, 1));
        let img = Tensor::new(vec![2, 2, 1], vec![0.0; 4]).unwrap();
        assert!(matches!(
            saliency(&m, &img, 2, "x"),
            Err(ExplainError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn smoothing_identity_cases() {
        let m = ImportanceMap::new("a", 3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(smooth_for_viz(&m, 0.0).unwrap(), m);
        let c = ImportanceMap::new("c", 5, 4, vec![0.7; 20]).unwrap();
        let s = smooth_for_viz(&c, 1.7).unwrap();
        for v in s.values() {
            assert!((v - 0.7).abs() < 1e-12);
        }
        assert!(smooth_for_viz(&m, -1.0).is_err());
    }

    #[test]
    fn impulse_matches_closed_form_gaussian() {
        let n = 41;
        let mut v = vec![0.0; n * n];
        v[20 * n + 20] = 1.0;
        let m = ImportanceMap::new("i", n, n, v).unwrap();
        let s = smooth_for_viz(&m, 2.0).unwrap();
        // oracle: exp(-r^2 / 2 sigma^2) normalized over the image
        let mut oracle = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let dy = y as f64 - 20.0;
                let dx = x as f64 - 20.0;
                oracle[y * n + x] = (-(dx * dx + dy * dy) / 8.0).exp();
            }
        }
        let z: f64 = oracle.iter().sum();
        for (a, b) in s.values().iter().zip(&oracle) {
            assert!((a - b / z).abs() <= 1e-6);
        }
    }

    #[test]
    fn smoothing_preserves_mass_near_borders() {
        let v: Vec<f64> = (0..35).map(|i| ((i * 13) % 7) as f64).collect();
        let m = ImportanceMap::new("b", 7, 5, v).unwrap();
        let s = smooth_for_viz(&m, 3.0).unwrap();
        assert!((s.sum() - m.sum()).abs() <= 1e-6 * m.sum());
    }

    #[test]
    fn smoothing_commutes_with_transpose() {
        let v: Vec<f64> = (0..48).map(|i| ((i * 31) % 11) as f64).collect();
        let m = ImportanceMap::new("t", 8, 6, v).unwrap();
        let a = smooth_for_viz(&m.transposed(), 1.3).unwrap();
        let b = smooth_for_viz(&m, 1.3).unwrap().transposed();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
