//! Gaussian pyramids of importance maps.
//!
//! Each level blurs the previous one with the separable binomial kernel
//! `[1, 4, 6, 4, 1] / 16` under mirror (reflect-101) borders and keeps every
//! second sample, so a level of extent `n` becomes `ceil(n / 2)`.

use thiserror::Error;

use crate::diffcore::{kernels::reflect_index, Graph, GraphError, NodeId, Pad2d, PadMode, Tensor};
use crate::explain::ImportanceMap;

pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
pub const DEFAULT_LEVELS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum PyramidError {
    #[error("cannot downsample a {width}x{height} map")]
    Degenerate { width: usize, height: usize },
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("{levels} levels do not fit a {width}x{height} map")]
    TooManyLevels { levels: usize, width: usize, height: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<ImportanceMap>,
}

impl Pyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

fn blur_decimate(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            let cx = 2 * ox as isize;
            let mut s = 0.0;
            for (t, k) in BINOMIAL5.iter().enumerate() {
                s += k * src[y * w + reflect_index(cx + t as isize - 2, w)];
            }
            rows[y * ow + ox] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        let cy = 2 * oy as isize;
        for ox in 0..ow {
            let mut s = 0.0;
            for (t, k) in BINOMIAL5.iter().enumerate() {
                s += k * rows[reflect_index(cy + t as isize - 2, h) * ow + ox];
            }
            out[oy * ow + ox] = s;
        }
    }
    (out, ow, oh)
}

pub fn downsample(map: &ImportanceMap) -> Result<ImportanceMap, PyramidError> {
    let (w, h) = (map.width(), map.height());
    if w < 2 || h < 2 {
        return Err(PyramidError::Degenerate { width: w, height: h });
    }
    let (out, ow, oh) = blur_decimate(map.values(), w, h);
    Ok(ImportanceMap::from_signed(map.image_id.clone(), ow, oh, out).expect("blur of a valid map is a valid map"))
}

/// Extents `(width, height)` of every level, or an error when level `n`
/// would require downsampling a map narrower than 2 pixels.
pub fn level_extents(width: usize, height: usize, levels: usize) -> Result<Vec<(usize, usize)>, PyramidError> {
    if levels == 0 {
        return Err(PyramidError::NoLevels);
    }
    let mut out = vec![(width, height)];
    while out.len() < levels {
        let (w, h) = *out.last().unwrap();
        if w < 2 || h < 2 {
            return Err(PyramidError::TooManyLevels { levels, width, height });
        }
        out.push((w.div_ceil(2), h.div_ceil(2)));
    }
    Ok(out)
}

pub fn build_pyramid(map: &ImportanceMap, levels: usize) -> Result<Pyramid, PyramidError> {
    level_extents(map.width(), map.height(), levels)?;
    let mut out = vec![map.clone()];
    while out.len() < levels {
        let next = downsample(out.last().unwrap())?;
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}

/// Downsamples a map by an integer power-of-two `factor` (1 is identity).
pub fn downscale(map: &ImportanceMap, factor: usize) -> Result<ImportanceMap, PyramidError> {
    let mut cur = map.clone();
    let mut f = factor.max(1);
    while f > 1 {
        cur = downsample(&cur)?;
        f /= 2;
    }
    Ok(cur)
}

/// Differentiable counterpart of [`downsample`] for `[batch, 1, H, W]`
/// nodes: reflect padding by 2 then a stride-2 5x5 binomial convolution.
pub fn downsample_node(g: &mut Graph, x: NodeId) -> Result<NodeId, PyramidError> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(GraphError::Shape(format!("expected [batch, 1, H, W], got {s:?}")).into());
    }
    if s[2] < 2 || s[3] < 2 {
        return Err(PyramidError::Degenerate {
            width: s[3],
            height: s[2],
        });
    }
    let mut k = vec![0.0; 25];
    for i in 0..5 {
        for j in 0..5 {
            k[i * 5 + j] = BINOMIAL5[i] * BINOMIAL5[j];
        }
    }
    let kernel = g.constant(Tensor::new(vec![1, 1, 5, 5], k)?);
    let padded = g.pad2d(x, Pad2d::uniform(2, PadMode::Reflect))?;
    Ok(g.conv2d(padded, kernel, 2)?)
}

/// All pyramid levels of a `[batch, 1, H, W]` node, level 1 first.
pub fn pyramid_nodes(g: &mut Graph, x: NodeId, levels: usize) -> Result<Vec<NodeId>, PyramidError> {
    let s = g.shape(x).to_vec();
    level_extents(*s.last().unwrap_or(&0), s.get(2).copied().unwrap_or(0), levels)?;
    let mut out = vec![x];
    while out.len() < levels {
        let next = downsample_node(g, *out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}
