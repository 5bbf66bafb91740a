//! The graph engine against hand-written references: a loop-based forward
//! pass, symmetric Hessians through double backprop, and linearity of the
//! gradient.

use harmonizer_core::{Architecture, Graph, Model, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Zero-padded 3x3 convolution written as plain loops.
fn conv_ref(x: &[f64], c_in: usize, n: usize, w: &[f64], b: &[f64], c_out: usize, stride: usize) -> (Vec<f64>, usize) {
    let m = (n + 2 - 3) / stride + 1;
    let mut out = vec![0.0; c_out * m * m];
    for o in 0..c_out {
        for y in 0..m {
            for xx in 0..m {
                let mut s = b[o];
                for c in 0..c_in {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let r = (y * stride + ki) as isize - 1;
                            let q = (xx * stride + kj) as isize - 1;
                            if r < 0 || q < 0 || r >= n as isize || q >= n as isize {
                                continue;
                            }
                            s += w[((o * c_in + c) * 3 + ki) * 3 + kj] * x[(c * n + r as usize) * n + q as usize];
                        }
                    }
                }
                out[(o * m + y) * m + xx] = s;
            }
        }
    }
    (out, m)
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

#[test]
fn forward_matches_loop_reference() {
    let (c, n, width, classes) = (2, 7, 3, 4);
    let model = Model::init(Architecture::toy_convnet(c, n, width, classes), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f64> = (0..c * n * n).map(|_| rng.random::<f64>() - 0.5).collect();
    let p = |k: &str| model.params[k].values().to_vec();
    let (h1, m1) = conv_ref(&x, c, n, &p("layer0.weight"), &p("layer0.bias"), width, 1);
    let (h2, _) = conv_ref(&relu(h1), width, m1, &p("layer2.weight"), &p("layer2.bias"), width, 2);
    let h2 = relu(h2);
    let (dw, db) = (p("layer5.weight"), p("layer5.bias"));
    let want: Vec<f64> = (0..classes)
        .map(|k| db[k] + h2.iter().enumerate().map(|(i, v)| v * dw[i * classes + k]).sum::<f64>())
        .collect();
    let got = model.logits(&Tensor::new(vec![1, c, n, n], x).unwrap()).unwrap();
    for (a, b) in got.values().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

/// A smooth scalar function of a 5-vector `x` built from several ops.
fn smooth_fn(g: &mut Graph, x: NodeId) -> NodeId {
    let w = g.constant(
        Tensor::new(
            vec![5, 3],
            vec![
                0.3, -0.2, 0.5, 0.1, 0.4, -0.6, -0.3, 0.2, 0.7, 0.9, -0.1, 0.2, 0.05, 0.3, -0.4,
            ],
        )
        .unwrap(),
    );
    let z = g.matmul(x, w).unwrap();
    let t = g.constant(Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap());
    let ce = g.softmax_cross_entropy(z, t).unwrap();
    let sq = g.square(x);
    let s = g.sum(sq);
    let s1 = g.add_scalar(s, 1.0);
    let r = g.sqrt(s1);
    let inv = g.recip(r);
    let a = g.add(ce, inv).unwrap();
    let m = g.mul(a, a).unwrap();
    g.sum(m)
}

fn hessian(x0: &[f64]) -> Vec<Vec<f64>> {
    let n = x0.len();
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(vec![1, n], x0.to_vec()).unwrap());
    let f = smooth_fn(&mut g, x);
    let gx = g.grad(f, &[x]).unwrap()[0];
    (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let sel = g.constant(Tensor::new(vec![1, n], e).unwrap());
            let gi = g.mul(gx, sel).unwrap();
            let gi = g.sum(gi);
            let row = g.grad(gi, &[x]).unwrap()[0];
            g.value(row).values().to_vec()
        })
        .collect()
}

fn gradient(x0: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(vec![1, x0.len()], x0.to_vec()).unwrap());
    let f = smooth_fn(&mut g, x);
    let gx = g.grad(f, &[x]).unwrap()[0];
    g.value(gx).values().to_vec()
}

#[test]
fn hessian_is_symmetric_and_matches_differenced_gradient() {
    let x0 = [0.3, -0.7, 1.1, 0.2, -0.4];
    let h = hessian(&x0);
    let eps = 1e-5;
    for i in 0..5 {
        for j in 0..5 {
            assert!((h[i][j] - h[j][i]).abs() <= 1e-10, "H[{i}][{j}]");
        }
        let (mut up, mut dn) = (x0.to_vec(), x0.to_vec());
        up[i] += eps;
        dn[i] -= eps;
        let (gu, gd) = (gradient(&up), gradient(&dn));
        for j in 0..5 {
            let num = (gu[j] - gd[j]) / (2.0 * eps);
            assert!(
                (num - h[i][j]).abs() <= 1e-6 * (1.0 + num.abs()),
                "H[{i}][{j}] {} vs {num}",
                h[i][j]
            );
        }
    }
}

#[test]
fn gradient_is_linear_in_the_root() {
    let x0 = Tensor::new(vec![1, 5], vec![0.1, 0.2, -0.3, 0.4, 0.5]).unwrap();
    let mut g = Graph::new();
    let x = g.variable(x0);
    let f = smooth_fn(&mut g, x);
    let sq = g.square(x);
    let h = g.sum(sq);
    let af = g.scale(f, 2.5);
    let bh = g.scale(h, -0.75);
    let comb = g.add(af, bh).unwrap();
    let gc = g.grad(comb, &[x]).unwrap()[0];
    let gf = g.grad(f, &[x]).unwrap()[0];
    let gh = g.grad(h, &[x]).unwrap()[0];
    let (c, a, b) = (g.value(gc).values(), g.value(gf).values(), g.value(gh).values());
    for k in 0..5 {
        assert!((c[k] - (2.5 * a[k] - 0.75 * b[k])).abs() <= 1e-12);
    }
}

#[test]
fn relu_mask_is_constant_under_differentiation() {
    // f = sum(relu(x) * x): f' = 2 relu(x), f'' = 2 * mask with no term
    // from differentiating the mask.
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap());
    let r = g.relu(x);
    let p = g.mul(r, x).unwrap();
    let s = g.sum(p);
    let gx = g.grad(s, &[x]).unwrap()[0];
    assert_eq!(g.value(gx).values(), &[0.0, 1.0, 4.0]);
    let t = g.sum(gx);
    let hx = g.grad(t, &[x]).unwrap()[0];
    assert_eq!(g.value(hx).values(), &[0.0, 2.0, 2.0]);
}
