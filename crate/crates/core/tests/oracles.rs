//! Library results against independent reference computations.

use gfla::flow_loss::{affine_regularization_loss, max_source_similarity, sampling_correctness_loss, SamplingCorrectnessOptions};
use gfla::tensor::{nn, Tape, Tensor};
use gfla::warp::FlowField;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ_patches ‖T − S·pinv(S)·T‖²` with homogeneous source rows, per sample.
fn affine_residual_pinv(flow: &Tensor<f64>, n: usize) -> f64 {
    let [_, _, h, w] = flow.dims4("oracle").unwrap();
    let r = n / 2;
    let mut total = 0.0;
    for cy in r..h - r {
        for cx in r..w - r {
            let mut s = Vec::new();
            let mut t = Vec::new();
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    let fx = flow.data()[flow.idx4(0, 0, y, x)];
                    let fy = flow.data()[flow.idx4(0, 1, y, x)];
                    s.extend([x as f64 + fx, y as f64 + fy, 1.0]);
                    t.extend([x as f64, y as f64]);
                }
            }
            let s = DMatrix::from_row_slice(n * n, 3, &s);
            let t = DMatrix::from_row_slice(n * n, 2, &t);
            let theta = s.clone().pseudo_inverse(1e-12).unwrap() * &t;
            total += (&t - &s * theta).norm_squared();
        }
    }
    total
}

#[test]
fn affine_regularization_matches_pseudo_inverse_on_random_flows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let flow = random(&mut rng, &[1, 2, 8, 8], -3.0, 3.0);
        let tape = Tape::new();
        let (loss, _) = affine_regularization_loss(tape.constant(flow.clone()), 3, 1).unwrap();
        let oracle = affine_residual_pinv(&flow, 3);
        let rel = (loss.value().item() - oracle).abs() / oracle.abs().max(1e-300);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn affine_regularization_batch_is_mean_of_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random(&mut rng, &[1, 2, 7, 9], -2.0, 2.0);
    let b = random(&mut rng, &[1, 2, 7, 9], -2.0, 2.0);
    let both = Tensor::cat_batch(&[a.clone(), b.clone()]).unwrap();
    let tape = Tape::new();
    let (l, report) = affine_regularization_loss(tape.constant(both), 3, 1).unwrap();
    let expect = 0.5 * (affine_residual_pinv(&a, 3) + affine_residual_pinv(&b, 3));
    assert!((l.value().item() - expect).abs() < 1e-9 * expect);
    assert_eq!(report.patches, 2 * 5 * 7);
}

fn brute_mu_max(vs: &Tensor<f64>, vt: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = vs.dims4("oracle").unwrap();
    let mut out = Vec::new();
    for b in 0..n {
        for ty in 0..h {
            for tx in 0..w {
                let mut best = f64::NEG_INFINITY;
                for sy in 0..h {
                    for sx in 0..w {
                        let (mut dot, mut ns, mut nt) = (0.0, 0.0, 0.0);
                        for ch in 0..c {
                            let s = vs.data()[vs.idx4(b, ch, sy, sx)];
                            let t = vt.data()[vt.idx4(b, ch, ty, tx)];
                            dot += s * t;
                            ns += s * s;
                            nt += t * t;
                        }
                        let mu = dot / (f64::sqrt(ns) * f64::sqrt(nt) + gfla::flow_loss::COSINE_EPS);
                        best = best.max(mu);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

#[test]
fn similarity_maximum_matches_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let vs = random(&mut rng, &[2, 5, 6, 7], -1.0, 1.0);
        let vt = random(&mut rng, &[2, 5, 6, 7], -1.0, 1.0);
        let lib = max_source_similarity(&vs, &vt).unwrap();
        assert_eq!(lib.data(), brute_mu_max(&vs, &vt).as_slice());
    }
}

#[test]
fn sampling_correctness_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let vs = random(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);
        let vt = random(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);
        let tape = Tape::new();
        let zero = FlowField::<f64>::zeros(1, 6, 6).into_tensor();
        let (loss, rep) = sampling_correctness_loss(
            tape.constant(vs.clone()),
            tape.constant(vt.clone()),
            tape.constant(zero),
            &SamplingCorrectnessOptions::default(),
        )
        .unwrap();
        let mu_max = brute_mu_max(&vs, &vt);
        let (mut acc, mut count) = (0.0, 0);
        for (l, &m) in mu_max.iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            let (mut dot, mut ns, mut nt) = (0.0, 0.0, 0.0);
            for ch in 0..4 {
                let s = vs.data()[ch * 36 + l];
                let t = vt.data()[ch * 36 + l];
                dot += s * t;
                ns += s * s;
                nt += t * t;
            }
            acc += (-(dot / (ns.sqrt() * nt.sqrt() + 1e-8)) / m).exp();
            count += 1;
        }
        assert_eq!(rep.skipped, 36 - count);
        assert!((loss.value().item() - acc / count as f64).abs() < 1e-12);
    }
}

fn direct_conv(x: &Tensor<f64>, wt: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4("oracle").unwrap();
    let [o, _, kh, kw] = wt.dims4("oracle").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[x.idx4(b, ic, iy as usize, ix as usize)]
                                        * wt.data()[wt.idx4(oc, ic, ky, kx)];
                                }
                            }
                        }
                    }
                    let i = out.idx4(b, oc, y, xx);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1), (5, 1, 2)] {
        let x = random(&mut rng, &[2, 3, 9, 8], -1.0, 1.0);
        let wt = random(&mut rng, &[4, 3, k, k], -1.0, 1.0);
        let bias = random(&mut rng, &[4], -1.0, 1.0);
        let tape = Tape::new();
        let y = nn::conv2d(tape.constant(x.clone()), tape.constant(wt.clone()), Some(tape.constant(bias.clone())), stride, pad)
            .unwrap()
            .value();
        let oracle = direct_conv(&x, &wt, bias.data(), stride, pad);
        assert_eq!(y.shape(), oracle.shape());
        assert!(y.allclose(&oracle, 1e-12, 1e-12), "k={k} stride={stride} pad={pad}");
    }
}

#[test]
fn spectral_norm_with_converged_u_matches_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..5 {
        let wt = random(&mut rng, &[6, 3, 3, 3], -1.0, 1.0);
        let mut u = Tensor::from_fn(&[6], |i| 1.0 + i as f64);
        let tape = Tape::new();
        let mut normalized = None;
        for _ in 0..200 {
            let (wn, next) = nn::spectral_normalize(tape.constant(wt.clone()), &u).unwrap();
            u = next;
            normalized = Some(wn.value());
        }
        let wn = normalized.unwrap();
        let m = DMatrix::from_row_slice(6, 27, wt.data());
        let sigma = m.singular_values()[0];
        let mn = DMatrix::from_row_slice(6, 27, wn.data());
        assert!((mn.singular_values()[0] - 1.0).abs() < 1e-9);
        assert!((wt.data()[0] / wn.data()[0] - sigma).abs() < 1e-9 * sigma);
    }
}
