//! Numeric kernels behind the graph ops. All convolution tensors are NCHW
//! with OIHW weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{strides, Tensor};

/// Border handling for [`pad2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
}

/// Padding applied to the two trailing (spatial) axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub mode: PadMode,
}

impl Pad2d {
    pub fn uniform(p: usize, mode: PadMode) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
            mode,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.top + self.bottom + self.left + self.right == 0
    }

    pub fn padded_shape(&self, shape: &[usize]) -> Vec<usize> {
        let r = shape.len();
        let mut out = shape.to_vec();
        out[r - 2] += self.top + self.bottom;
        out[r - 1] += self.left + self.right;
        out
    }
}

/// Source index of padded coordinate `i` (may be negative or past `n`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn pad_source(i: usize, before: usize, n: usize, mode: PadMode) -> Option<usize> {
    let rel = i as isize - before as isize;
    if (0..n as isize).contains(&rel) {
        return Some(rel as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => Some(reflect_index(rel, n)),
    }
}

pub fn pad2d(x: &Tensor, pad: &Pad2d) -> Tensor {
    let shape = x.shape();
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let out_shape = pad.padded_shape(shape);
    let (ph, pw) = (out_shape[r - 2], out_shape[r - 1]);
    let planes = x.len() / (h * w);
    let rows: Vec<Option<usize>> = (0..ph).map(|i| pad_source(i, pad.top, h, pad.mode)).collect();
    let cols: Vec<Option<usize>> = (0..pw).map(|j| pad_source(j, pad.left, w, pad.mode)).collect();
    let src = x.values();
    let mut out = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        let sp = &src[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * ph * pw..(p + 1) * ph * pw];
        for (i, ri) in rows.iter().enumerate() {
            let Some(ri) = ri else { continue };
            for (j, cj) in cols.iter().enumerate() {
                if let Some(cj) = cj {
                    op[i * pw + j] = sp[ri * w + cj];
                }
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// Adjoint of [`pad2d`]: folds padded-space values back onto their sources.
pub fn pad2d_adjoint(g: &Tensor, pad: &Pad2d, orig: &[usize]) -> Tensor {
    let r = orig.len();
    let (h, w) = (orig[r - 2], orig[r - 1]);
    let gs = g.shape();
    let (ph, pw) = (gs[r - 2], gs[r - 1]);
    let planes = g.len() / (ph * pw);
    let rows: Vec<Option<usize>> = (0..ph).map(|i| pad_source(i, pad.top, h, pad.mode)).collect();
    let cols: Vec<Option<usize>> = (0..pw).map(|j| pad_source(j, pad.left, w, pad.mode)).collect();
    let src = g.values();
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let sp = &src[p * ph * pw..(p + 1) * ph * pw];
        let op = &mut out[p * h * w..(p + 1) * h * w];
        for (i, ri) in rows.iter().enumerate() {
            let Some(ri) = ri else { continue };
            for (j, cj) in cols.iter().enumerate() {
                if let Some(cj) = cj {
                    op[ri * w + cj] += sp[i * pw + j];
                }
            }
        }
    }
    Tensor::from_parts(orig.to_vec(), out)
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (input >= kernel && stride > 0).then(|| (input - kernel) / stride + 1)
}

/// Valid (unpadded) strided cross-correlation.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let [n, ci, h, wd] = dims4(x.shape());
    let [co, _, kh, kw] = dims4(w.shape());
    let oh = (h - kh) / stride + 1;
    let ow = (wd - kw) / stride + 1;
    let xv = x.values();
    let wv = w.values();
    let mut out = vec![0.0; n * co * oh * ow];
    out.par_chunks_mut(co * oh * ow).enumerate().for_each(|(b, ob)| {
        let xb = &xv[b * ci * h * wd..(b + 1) * ci * h * wd];
        for o in 0..co {
            let oo = &mut ob[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..ci {
                let xc = &xb[c * h * wd..(c + 1) * h * wd];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wt = wv[((o * ci + c) * kh + ki) * kw + kj];
                        if wt == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let xr = &xc[(y * stride + ki) * wd + kj..];
                            let orow = &mut oo[y * ow..(y + 1) * ow];
                            if stride == 1 {
                                for (ov, xv) in orow.iter_mut().zip(&xr[..ow]) {
                                    *ov += wt * xv;
                                }
                            } else {
                                for (x, ov) in orow.iter_mut().enumerate() {
                                    *ov += wt * xr[x * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_parts(vec![n, co, oh, ow], out)
}

/// Gradient of [`conv2d`] with respect to its input, given the output
/// cotangent `g` and the input shape.
pub fn conv2d_back_input(g: &Tensor, w: &Tensor, stride: usize, x_shape: &[usize]) -> Tensor {
    let [n, ci, h, wd] = dims4(x_shape);
    let [co, _, kh, kw] = dims4(w.shape());
    let [_, _, oh, ow] = dims4(g.shape());
    let gv = g.values();
    let wv = w.values();
    let mut out = vec![0.0; n * ci * h * wd];
    out.par_chunks_mut(ci * h * wd).enumerate().for_each(|(b, xb)| {
        let gb = &gv[b * co * oh * ow..(b + 1) * co * oh * ow];
        for o in 0..co {
            let go = &gb[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..ci {
                let xc = &mut xb[c * h * wd..(c + 1) * h * wd];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wt = wv[((o * ci + c) * kh + ki) * kw + kj];
                        if wt == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let grow = &go[y * ow..(y + 1) * ow];
                            let base = (y * stride + ki) * wd + kj;
                            if stride == 1 {
                                for (xv, gv) in xc[base..base + ow].iter_mut().zip(grow) {
                                    *xv += wt * gv;
                                }
                            } else {
                                for (x, gv) in grow.iter().enumerate() {
                                    xc[base + x * stride] += wt * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_parts(x_shape.to_vec(), out)
}

/// Gradient of [`conv2d`] with respect to its weights. Per-sample partials
/// are summed in batch order so the result does not depend on scheduling.
pub fn conv2d_back_weight(x: &Tensor, g: &Tensor, stride: usize, w_shape: &[usize]) -> Tensor {
    let [n, ci, h, wd] = dims4(x.shape());
    let [co, _, kh, kw] = dims4(w_shape);
    let [_, _, oh, ow] = dims4(g.shape());
    let xv = x.values();
    let gv = g.values();
    let wlen = co * ci * kh * kw;
    let partials: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let xb = &xv[b * ci * h * wd..(b + 1) * ci * h * wd];
            let gb = &gv[b * co * oh * ow..(b + 1) * co * oh * ow];
            let mut acc = vec![0.0; wlen];
            for o in 0..co {
                let go = &gb[o * oh * ow..(o + 1) * oh * ow];
                for c in 0..ci {
                    let xc = &xb[c * h * wd..(c + 1) * h * wd];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let mut s = 0.0;
                            for y in 0..oh {
                                let grow = &go[y * ow..(y + 1) * ow];
                                let base = (y * stride + ki) * wd + kj;
                                if stride == 1 {
                                    for (gv, xv) in grow.iter().zip(&xc[base..base + ow]) {
                                        s += gv * xv;
                                    }
                                } else {
                                    for (x, gv) in grow.iter().enumerate() {
                                        s += gv * xc[base + x * stride];
                                    }
                                }
                            }
                            acc[((o * ci + c) * kh + ki) * kw + kj] = s;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; wlen];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    Tensor::from_parts(w_shape.to_vec(), out)
}

fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = av[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let av = a.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = av[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// True when `small` can be broadcast to `big` (same rank, each axis equal
/// or 1).
pub fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1)
}

/// Visits every flat index of `big` together with the flat index of the
/// broadcast source of shape `small`.
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let r = big.len();
    let ss = strides(small);
    let eff: Vec<usize> = (0..r).map(|i| if small[i] == 1 { 0 } else { ss[i] }).collect();
    let total: usize = big.iter().product();
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for flat in 0..total {
        f(flat, src);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < big[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Tensor {
    let xv = x.values();
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(x.shape(), shape, |o, s| out[o] = xv[s]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// Sums `x` down to `shape`, the adjoint of [`broadcast_to`].
pub fn reduce_to(x: &Tensor, shape: &[usize]) -> Tensor {
    let xv = x.values();
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(shape, x.shape(), |i, s| out[s] += xv[i]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// Maximum along `axis` (kept as extent 1) plus the one-hot mask of the
/// first maximal element along that axis.
pub fn max_along(x: &Tensor, axis: usize) -> (Tensor, Tensor) {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let xv = x.values();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 1;
    let mut out = vec![0.0; outer * inner];
    let mut mask = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for k in 0..len {
                let v = xv[(o * len + k) * inner + i];
                if v > bv {
                    bv = v;
                    best = k;
                }
            }
            out[o * inner + i] = bv;
            mask[(o * len + best) * inner + i] = 1.0;
        }
    }
    (
        Tensor::from_parts(out_shape, out),
        Tensor::from_parts(shape.to_vec(), mask),
    )
}

/// Row-wise softmax of a `[rows, classes]` matrix.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let (m, n) = (z.shape()[0], z.shape()[1]);
    let zv = z.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &zv[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = (v - mx).exp();
            s += *o;
        }
        for o in &mut out[i * n..(i + 1) * n] {
            *o /= s;
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Mean over rows of `-Σ_k t_k log softmax(z)_k`.
pub fn softmax_cross_entropy(z: &Tensor, targets: &Tensor) -> f64 {
    let (m, n) = (z.shape()[0], z.shape()[1]);
    let zv = z.values();
    let tv = targets.values();
    let mut total = 0.0;
    for i in 0..m {
        let row = &zv[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for k in 0..n {
            total -= tv[i * n + k] * (row[k] - lse);
        }
    }
    total / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-2, 2), 0);
        assert_eq!(reflect_index(3, 2), 1);
    }

    #[test]
    fn pad_adjoint_is_transpose() {
        let x = t(&[1, 1, 3, 4], (0..12).map(|v| v as f64 * 0.7 - 2.0).collect());
        let g = t(&[1, 1, 7, 8], (0..56).map(|v| (v as f64).sin()).collect());
        for mode in [PadMode::Zero, PadMode::Reflect] {
            let p = Pad2d::uniform(2, mode);
            let lhs = pad2d(&x, &p).dot(&g);
            let rhs = x.dot(&pad2d_adjoint(&g, &p, x.shape()));
            assert!((lhs - rhs).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn conv_adjoints() {
        let x = t(&[2, 2, 6, 5], (0..120).map(|v| ((v * 7) % 11) as f64 - 5.0).collect());
        let w = t(&[3, 2, 3, 3], (0..54).map(|v| ((v * 5) % 7) as f64 * 0.25).collect());
        for stride in [1, 2] {
            let y = conv2d(&x, &w, stride);
            let g = y.map(|v| (v * 0.1).cos());
            let dx = conv2d_back_input(&g, &w, stride, x.shape());
            let dw = conv2d_back_weight(&x, &g, stride, w.shape());
            let a = y.dot(&g);
            assert!((a - x.dot(&dx)).abs() < 1e-9);
            assert!((a - w.dot(&dw)).abs() < 1e-9);
        }
    }

    #[test]
    fn broadcast_reduce_pair() {
        let x = t(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = broadcast_to(&x, &[2, 2, 3]);
        assert_eq!(&b.values()[..6], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let r = reduce_to(&b, &[2, 1, 3]);
        assert_eq!(r.values(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
        let s = reduce_to(&b, &[1, 1, 1]);
        assert_eq!(s.values(), &[42.0]);
    }

    #[test]
    fn max_along_axis_first_wins() {
        let x = t(&[1, 2, 2], vec![1.0, 5.0, 3.0, 5.0]);
        let (m, mask) = max_along(&x, 1);
        assert_eq!(m.values(), &[3.0, 5.0]);
        assert_eq!(mask.values(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 1], vec![1.0, 0.0, -1.0]);
        assert_eq!(matmul(&a, &b).values(), &[-2.0, -2.0]);
        assert_eq!(transpose(&a).values(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
