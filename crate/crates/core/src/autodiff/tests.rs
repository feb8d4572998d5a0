use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Like [`random`] but bounded away from zero, so relu kinks sit far from
/// the finite-difference stencil.
fn random_off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn run(f: impl FnOnce(&mut Graph) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).clone()
}

const H: f64 = 1e-5;

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Config(_))));
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
}

#[test]
fn conv_identity_kernel_returns_input() {
    let x = random(&[2, 3, 5, 4], 1);
    let mut eye = vec![0.0; 9];
    for c in 0..3 {
        eye[c * 3 + c] = 1.0;
    }
    let out = run(|g| {
        let xv = g.constant(x.clone());
        let k = g.constant(t(&[3, 3, 1, 1], &eye));
        g.conv2d(xv, k, None, ConvOptions::default()).unwrap()
    });
    assert_eq!(out, x);
}

#[test]
fn conv_all_ones_three_by_three_sums_to_nine() {
    let out = run(|g| {
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        g.conv2d(x, k, None, ConvOptions::default()).unwrap()
    });
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data(), &[9.0]);
}

#[test]
fn conv_dilated_same_padding_keeps_size() {
    let opts = ConvOptions { stride: 1, padding: 2, dilation: 2 };
    assert_eq!(conv_output_size(7, 3, opts), Some(7));
    let out = run(|g| {
        let x = g.constant(random(&[1, 2, 7, 7], 2));
        let k = g.constant(random(&[4, 2, 3, 3], 3));
        g.conv2d(x, k, None, opts).unwrap()
    });
    assert_eq!(out.shape(), &[1, 4, 7, 7]);
}

/// Direct nested-loop cross-correlation used as an independent reference.
fn conv_reference(x: &Tensor, k: &Tensor, opts: ConvOptions) -> Tensor {
    let (b, cin, h, w) = x.dims4().unwrap();
    let (cout, _, kh, kw) = k.dims4().unwrap();
    let ho = (h + 2 * opts.padding - opts.dilation * (kh - 1) - 1) / opts.stride + 1;
    let wo = (w + 2 * opts.padding - opts.dilation * (kw - 1) - 1) / opts.stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * opts.stride + i * opts.dilation) as isize - opts.padding as isize;
                                let ix = (ox * opts.stride + j * opts.dilation) as isize - opts.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.data()[((n * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((co * cin + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((n * cout + co) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    t(&[b, cout, ho, wo], &out)
}

#[test]
fn conv_matches_direct_loops_and_size_formula() {
    let mut seed = 10;
    for stride in 1..=3 {
        for padding in 0..=3 {
            for dilation in 1..=3 {
                let opts = ConvOptions { stride, padding, dilation };
                let x = random(&[2, 2, 9, 8], seed);
                let k = random(&[3, 2, 3, 2], seed + 1);
                seed += 2;
                let got = run(|g| {
                    let xv = g.constant(x.clone());
                    let kv = g.constant(k.clone());
                    g.conv2d(xv, kv, None, opts).unwrap()
                });
                let want = conv_reference(&x, &k, opts);
                assert_eq!(got.shape(), want.shape(), "{opts:?}");
                assert_eq!(got.shape()[2], conv_output_size(9, 3, opts).unwrap());
                assert_eq!(got.shape()[3], conv_output_size(8, 2, opts).unwrap());
                for (a, b) in got.data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_rejects_bad_configuration() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 2, 5, 5]));
    let k = g.constant(Tensor::ones(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, k, None, ConvOptions::default()), Err(Error::Config(_))));
    let k = g.constant(Tensor::ones(&[1, 2, 3, 3]));
    for opts in [
        ConvOptions { stride: 0, padding: 0, dilation: 1 },
        ConvOptions { stride: 1, padding: 0, dilation: 0 },
        ConvOptions { stride: 1, padding: 0, dilation: 3 },
    ] {
        assert!(matches!(g.conv2d(x, k, None, opts), Err(Error::Config(_))), "{opts:?}");
    }
}

#[test]
fn max_pool_examples() {
    let out = run(|g| {
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        g.max_pool2(x).unwrap()
    });
    assert_eq!(out.data(), &[4.0]);
    let out = run(|g| {
        let x = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64));
        g.max_pool2(x).unwrap()
    });
    assert_eq!(out.data(), &[6.0, 8.0, 14.0, 16.0]);
    let out = run(|g| {
        let x = g.constant(Tensor::full(&[2, 3, 4, 6], 2.5));
        g.max_pool2(x).unwrap()
    });
    assert!(out.data().iter().all(|&v| v == 2.5));
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 4]));
    assert!(matches!(g.max_pool2(x), Err(Error::Config(_))));
}

#[test]
fn max_pool_ties_route_gradient_to_first_element() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.max_pool2(x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_examples() {
    let x = random(&[1, 2, 3, 4], 4);
    let out = run(|g| {
        let v = g.constant(x.clone());
        g.bilinear_upsample(v, 1).unwrap()
    });
    assert_eq!(out, x);
    let out = run(|g| {
        let v = g.constant(Tensor::full(&[1, 1, 3, 2], -1.25));
        g.bilinear_upsample(v, 3).unwrap()
    });
    assert!(out.data().iter().all(|&v| (v + 1.25).abs() < 1e-15));
    let out = run(|g| {
        let v = g.constant(t(&[1, 1, 1, 2], &[0.0, 2.0]));
        g.bilinear_upsample(v, 2).unwrap()
    });
    assert_eq!(out.shape(), &[1, 1, 2, 4]);
    let want = [0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0];
    for row in out.data().chunks(4) {
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn group_count_follows_sixteen_channel_rule() {
    assert_eq!(group_count(8, 16).unwrap(), 8);
    assert_eq!(group_count(16, 16).unwrap(), 16);
    assert_eq!(group_count(32, 16).unwrap(), 2);
    assert_eq!(group_count(512, 16).unwrap(), 32);
    assert!(matches!(group_count(24, 16), Err(Error::Config(_))));
}

fn gn(g: &mut Graph, x: Var, c: usize, gamma: f64, beta: f64, eps: f64) -> Var {
    let gm = g.constant(Tensor::full(&[c], gamma));
    let bt = g.constant(Tensor::full(&[c], beta));
    g.group_normalize(x, GroupNormParams::new(gm, bt, eps)).unwrap()
}

#[test]
fn group_norm_examples() {
    let out = run(|g| {
        let x = g.constant(Tensor::full(&[1, 4, 3, 3], 7.0));
        gn(g, x, 4, 1.0, 0.0, 1e-5)
    });
    assert!(out.data().iter().all(|&v| v == 0.0));
    let out = run(|g| {
        let x = g.constant(t(&[1, 1, 1, 2], &[1.0, 3.0]));
        gn(g, x, 1, 1.0, 0.0, 1e-14)
    });
    assert!((out.data()[0] + 1.0).abs() < 1e-12 && (out.data()[1] - 1.0).abs() < 1e-12);
    let out = run(|g| {
        let x = g.constant(random(&[2, 32, 3, 3], 5));
        gn(g, x, 32, 0.0, 0.75, 1e-5)
    });
    assert!(out.data().iter().all(|&v| v == 0.75));
}

#[test]
fn group_norm_output_statistics() {
    let (c, plane) = (48, 25);
    let x = random(&[2, c, 5, 5], 6);
    let eps = 1e-5;
    let out = run(|g| {
        let v = g.constant(x.clone());
        gn(g, v, c, 1.0, 0.0, eps)
    });
    let span = 16 * plane;
    for (xin, yout) in x.data().chunks(span).zip(out.data().chunks(span)) {
        let m = span as f64;
        let mu = xin.iter().sum::<f64>() / m;
        let var = xin.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
        let omu = yout.iter().sum::<f64>() / m;
        let ovar = yout.iter().map(|v| (v - omu).powi(2)).sum::<f64>() / m;
        assert!(omu.abs() < 1e-6);
        assert!((ovar - var / (var + eps)).abs() < 1e-5);
    }
}

#[test]
fn softmax_examples() {
    let out = run(|g| {
        let x = g.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 3f64.ln()]));
        g.softmax_rows(x)
    });
    assert_eq!(&out.data()[..2], &[0.5, 0.5]);
    assert!((out.data()[2] - 0.25).abs() < 1e-15 && (out.data()[3] - 0.75).abs() < 1e-15);
    let out = run(|g| {
        let x = g.constant(Tensor::from_fn(&[3, 4, 7], |i| (i as f64 * 1.7).sin() * 50.0));
        g.softmax_rows(x)
    });
    for row in out.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}

#[test]
fn matmul_examples() {
    let out = run(|g| {
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        g.matmul(a, b).unwrap()
    });
    assert_eq!(out.data(), &[17.0, 39.0]);
    let a = random(&[3, 3], 7);
    let out = run(|g| {
        let i = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let av = g.constant(a.clone());
        g.matmul(i, av).unwrap()
    });
    assert_eq!(out, a);
    let b = random(&[3, 3], 8);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let ab = g.matmul(av, bv).unwrap();
    let abt = g.transpose(ab, 0, 1).unwrap();
    let at = g.transpose(av, 0, 1).unwrap();
    let bt = g.transpose(bv, 0, 1).unwrap();
    let btat = g.matmul(bt, at).unwrap();
    for (x, y) in g.value(abt).data().iter().zip(g.value(btat).data()) {
        assert!((x - y).abs() < 1e-12);
    }
    let bad = g.constant(Tensor::ones(&[2, 2]));
    assert!(matches!(g.matmul(av, bad), Err(Error::Config(_))));
}

#[test]
fn matmul_broadcasts_batch_dims() {
    let a = random(&[2, 1, 3, 4], 9);
    let b = random(&[3, 4, 2], 10);
    let out = run(|g| {
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        g.matmul(av, bv).unwrap()
    });
    assert_eq!(out.shape(), &[2, 3, 3, 2]);
    for i in 0..2 {
        for j in 0..3 {
            for r in 0..3 {
                for c in 0..2 {
                    let want: f64 = (0..4)
                        .map(|p| a.data()[i * 12 + r * 4 + p] * b.data()[j * 8 + p * 2 + c])
                        .sum();
                    let got = out.data()[((i * 3 + j) * 3 + r) * 2 + c];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(random(&[3, 2], 11));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn backward_accumulates_over_fan_out() {
    let mut g = Graph::new();
    let x = g.param(random(&[4], 12));
    let a = g.sum(x);
    let b = g.sum(x);
    let y = g.add(a, b).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn backward_usage_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Usage(_))));
}

#[test]
fn grad_check_rejects_non_scalar_closure() {
    let r = grad_check(|g, v| Ok(g.relu(v[0])), &[Tensor::ones(&[2])], H);
    assert!(matches!(r, Err(Error::Usage(_))));
}

#[test]
fn grad_check_linear_is_exact() {
    let err = grad_check(
        |g, v| {
            let s = g.scale(v[0], 3.0);
            Ok(g.sum(s))
        },
        &[random(&[5, 3], 13)],
        H,
    )
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn grad_check_conv_relu_sum() {
    let err = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvOptions::same(3, 1))?;
            let r = g.relu(y);
            Ok(g.sum(r))
        },
        &[random_off_zero(&[1, 2, 6, 6], 14), random(&[3, 2, 3, 3], 15), random(&[3], 16)],
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_conv_strided_dilated() {
    let err = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvOptions { stride: 2, padding: 3, dilation: 3 })?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &[random(&[2, 2, 7, 8], 17), random(&[2, 2, 3, 3], 18), random(&[2], 19)],
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_group_norm_sum_of_squares() {
    let weights = random(&[1, 16, 4, 4], 22);
    let err = grad_check(
        |g, v| {
            let y = g.group_normalize(v[0], GroupNormParams::new(v[1], v[2], 1e-5))?;
            let w = g.constant(weights.clone());
            let yw = g.mul(y, w)?;
            let sq = g.mul(yw, yw)?;
            Ok(g.sum(sq))
        },
        &[random(&[1, 16, 4, 4], 20), random(&[16], 21), random(&[16], 23)],
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_group_norm_multi_channel_groups() {
    let weights = random(&[2, 32, 2, 3], 24);
    let err = grad_check(
        |g, v| {
            let y = g.group_normalize(v[0], GroupNormParams::new(v[1], v[2], 1e-5))?;
            let w = g.constant(weights.clone());
            let yw = g.mul(y, w)?;
            Ok(g.sum(yw))
        },
        &[random(&[2, 32, 2, 3], 25), random(&[32], 26), random(&[32], 27)],
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_matmul_softmax() {
    let weights = random(&[2, 3, 5], 30);
    let err = grad_check(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let s = g.softmax_rows(p);
            let w = g.constant(weights.clone());
            let sw = g.mul(s, w)?;
            Ok(g.sum(sw))
        },
        &[random(&[2, 3, 4], 28), random(&[4, 5], 29)],
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_pooling_and_upsampling() {
    let weights = random(&[1, 2, 8, 8], 31);
    let err = grad_check(
        |g, v| {
            let p = g.max_pool2(v[0])?;
            let a = g.avg_pool(p, 2)?;
            let u = g.bilinear_upsample(a, 4)?;
            let w = g.constant(weights.clone());
            let uw = g.mul(u, w)?;
            Ok(g.sum(uw))
        },
        &[random(&[1, 2, 8, 8], 32)],
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_shape_ops_and_reductions() {
    let weights = random(&[3, 2, 4], 33);
    let err = grad_check(
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let p = g.permute(c, &[2, 0, 1])?;
            let r = g.reshape(p, &[3, 2, 4])?;
            let w = g.constant(weights.clone());
            let d = g.sub(r, w)?;
            let e = g.mul(d, d)?;
            let m = g.mean(e);
            let r2 = g.relu(v[0]);
            let s = g.sum(r2);
            let total = g.add(m, s)?;
            Ok(g.scale(total, 0.5))
        },
        &[random_off_zero(&[2, 1, 3], 34), random(&[2, 3, 3], 35)],
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn inference_graph_skips_saved_context() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[2]));
    let y = g.relu(x);
    assert!(!g.requires_grad(y));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
}
