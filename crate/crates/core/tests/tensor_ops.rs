use proptest::prelude::*;
use spikeaudit::tensor::{Graph, Tensor, Var};

fn naive_affine(x: &[f64], w: &[f64], b: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut acc = b[c];
            for k in 0..i {
                acc += x[r * i + k] * w[k * o + c];
            }
            out[r * o + c] = acc;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    k: &[f64],
    b: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (f, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for bi in 0..n {
        for fi in 0..f {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                acc += xv * k[((fi * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn vals(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

/// Central finite-difference gradient of `f` at `x`.
fn fd_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().chain(b).map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_matches_naive_product(
        (n, i, o, x, w, b) in (1usize..6, 1usize..7, 1usize..6)
            .prop_flat_map(|(n, i, o)| (Just(n), Just(i), Just(o), vals(n * i), vals(i * o), vals(o)))
    ) {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new([n, i], x.clone()).unwrap());
        let wv = g.constant(Tensor::new([i, o], w.clone()).unwrap());
        let bv = g.constant(Tensor::new([o], b.clone()).unwrap());
        let y = g.affine(xv, wv, bv).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[n, o]);
        prop_assert!(close(g.value(y).data(), &naive_affine(&x, &w, &b, n, i, o), 1e-12));
    }

    #[test]
    fn conv_matches_direct_loops(
        (n, c, h, w, f, kh, kw, stride, pad, x, k, b) in
            (1usize..3, 1usize..3, 3usize..8, 3usize..8, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2)
                .prop_flat_map(|(n, c, h, w, f, kh, kw, s, p)| {
                    (Just(n), Just(c), Just(h), Just(w), Just(f), Just(kh), Just(kw), Just(s), Just(p),
                     vals(n * c * h * w), vals(f * c * kh * kw), vals(f))
                })
    ) {
        prop_assume!((h + 2 * pad - kh) % stride == 0 && (w + 2 * pad - kw) % stride == 0);
        let (expect, oh, ow) = naive_conv(&x, &k, &b, (n, c, h, w), (f, kh, kw), stride, pad);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new([n, c, h, w], x).unwrap());
        let kv = g.constant(Tensor::new([f, c, kh, kw], k).unwrap());
        let bv = g.constant(Tensor::new([f], b).unwrap());
        let y = g.conv2d(xv, kv, bv, stride, pad).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[n, f, oh, ow]);
        prop_assert!(close(g.value(y).data(), &expect, 1e-12));
    }

    #[test]
    fn maxpool_takes_window_maxima(
        (c, h, w, x) in (1usize..3, 1usize..5, 1usize..5)
            .prop_flat_map(|(c, h2, w2)| (Just(c), Just(2 * h2), Just(2 * w2), vals(c * 4 * h2 * w2)))
    ) {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new([1, c, h, w], x.clone()).unwrap());
        let y = g.maxpool2d(xv, 2, 2).unwrap();
        let (oh, ow) = (h / 2, w / 2);
        let mut expect = Vec::new();
        for ci in 0..c {
            for y0 in 0..oh {
                for x0 in 0..ow {
                    let at = |dy: usize, dx: usize| x[(ci * h + 2 * y0 + dy) * w + 2 * x0 + dx];
                    expect.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                }
            }
        }
        prop_assert_eq!(g.value(y).data(), &expect[..]);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp(
        (rows, cols, z, t) in (1usize..5, 2usize..6).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), prop::collection::vec(-30.0f64..30.0, r * c), prop::collection::vec(0..c, r))
        })
    ) {
        let mut g = Graph::<f64>::new();
        let zv = g.constant(Tensor::new([rows, cols], z.clone()).unwrap());
        let loss = g.softmax_cross_entropy(zv, &t).unwrap();
        let expect = (0..rows)
            .map(|r| {
                let row = &z[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[t[r]]
            })
            .sum::<f64>()
            / rows as f64;
        let got = g.value(loss).item();
        prop_assert!((got - expect).abs() <= 1e-10 * (1.0 + expect.abs()), "{} vs {}", got, expect);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn mlp_gradients_match_finite_differences(
        x in vals(3 * 4), w1 in vals(4 * 5), b1 in vals(5), w2 in vals(5 * 3), b2 in vals(3),
        t in prop::collection::vec(0usize..3, 3)
    ) {
        // Kinks of ReLU make FD unreliable within h of zero.
        let pre = naive_affine(&x, &w1, &b1, 3, 4, 5);
        prop_assume!(pre.iter().all(|v| v.abs() > 1e-3));
        let loss_of = |w1: &[f64]| {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(Tensor::new([3, 4], x.clone()).unwrap());
            let w1v = g.constant(Tensor::new([4, 5], w1.to_vec()).unwrap());
            let b1v = g.constant(Tensor::new([5], b1.clone()).unwrap());
            let w2v = g.constant(Tensor::new([5, 3], w2.clone()).unwrap());
            let b2v = g.constant(Tensor::new([3], b2.clone()).unwrap());
            let h = g.affine(xv, w1v, b1v).unwrap();
            let h = g.relu(h).unwrap();
            let z = g.affine(h, w2v, b2v).unwrap();
            let l = g.softmax_cross_entropy(z, &t).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new([3, 4], x.clone()).unwrap());
        let w1v = g.param(Tensor::new([4, 5], w1.clone()).unwrap());
        let b1v = g.param(Tensor::new([5], b1.clone()).unwrap());
        let w2v = g.param(Tensor::new([5, 3], w2.clone()).unwrap());
        let b2v = g.param(Tensor::new([3], b2.clone()).unwrap());
        let h = g.affine(xv, w1v, b1v).unwrap();
        let h = g.relu(h).unwrap();
        let z = g.affine(h, w2v, b2v).unwrap();
        let l = g.softmax_cross_entropy(z, &t).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad(w1v).unwrap().to_vec();
        let numeric = fd_grad(&w1, loss_of);
        prop_assert!(rel_err(&analytic, &numeric) < 1e-4, "{:?} vs {:?}", analytic, numeric);
    }

    #[test]
    fn conv_kernel_gradient_matches_finite_differences(
        x in vals(2 * 6 * 6), k in vals(3 * 2 * 3 * 3), b in vals(3), r in vals(3 * 4 * 4)
    ) {
        // Loss Σ r ⊙ conv(x, k) is linear in k.
        let forward = |g: &mut Graph<f64>, kv: Var| {
            let xv = g.constant(Tensor::new([1, 2, 6, 6], x.clone()).unwrap());
            let bv = g.constant(Tensor::new([3], b.clone()).unwrap());
            let rv = g.constant(Tensor::new([1, 3, 4, 4], r.clone()).unwrap());
            let y = g.conv2d(xv, kv, bv, 1, 0).unwrap();
            let p = g.mul(y, rv).unwrap();
            g.sum(p).unwrap()
        };
        let loss_of = |k: &[f64]| {
            let mut g = Graph::<f64>::new();
            let kv = g.constant(Tensor::new([3, 2, 3, 3], k.to_vec()).unwrap());
            let l = forward(&mut g, kv);
            g.value(l).item()
        };
        let mut g = Graph::<f64>::new();
        let kv = g.param(Tensor::new([3, 2, 3, 3], k.clone()).unwrap());
        let l = forward(&mut g, kv);
        g.backward(l).unwrap();
        let analytic = g.grad(kv).unwrap().to_vec();
        prop_assert!(rel_err(&analytic, &fd_grad(&k, loss_of)) < 1e-4);
    }
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2, 3]));
    let w = g.constant(Tensor::zeros([4, 2]));
    let b = g.constant(Tensor::zeros([2]));
    assert!(matches!(g.affine(x, w, b), Err(spikeaudit::Error::Dimension(_))));
}
