//! Neural-network primitives with hand-written backward rules.

use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let l = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..][..g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if xx < 0 || xx >= g.w as isize {
                            T::zero()
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let l = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + y as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[xx as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output spatial extent of a convolution, or `None` when the kernel does
/// not fit.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[n, c, h, w]`, `weight` is `[o, c, kh, kw]` and `bias`, when
/// given, is `[o]`.
pub fn conv2d<'t, T: Real>(
    input: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let x = input.value();
    let wt = weight.value();
    let [n, c, h, w] = x.dims4("conv2d")?;
    let [o, wc, kh, kw] = wt.dims4("conv2d")?;
    if wc != c {
        return Err(Error::dim("conv2d", "input channels (weight axis 1)", wc, c));
    }
    if let Some(b) = bias {
        let bs = b.shape();
        if bs != [o] {
            return Err(Error::dim("conv2d", "bias", format!("[{o}]"), format!("{bs:?}")));
        }
    }
    let (Some(oh), Some(ow)) = (
        conv_out_size(h, kh, stride, padding),
        conv_out_size(w, kw, stride, padding),
    ) else {
        return Err(Error::dim(
            "conv2d",
            "spatial size",
            format!(">= kernel {kh}x{kw} (stride {stride})"),
            format!("{h}x{w} padded by {padding}"),
        ));
    };
    let g = ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh,
        ow,
    };
    let (rows, l) = (g.rows(), g.cols());
    let pointwise = g.is_pointwise();

    let mut cols_all: Vec<T> = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); n * rows * l]
    };
    let mut out = vec![T::zero(); n * o * l];
    if let Some(b) = bias {
        let bv = b.value();
        for s in 0..n {
            for (oc, &bval) in bv.data().iter().enumerate() {
                out[(s * o + oc) * l..(s * o + oc + 1) * l].fill(bval);
            }
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    for s in 0..n {
        let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
        let cols: &[T] = if pointwise {
            xs
        } else {
            let dst = &mut cols_all[s * rows * l..(s + 1) * rows * l];
            im2col(&g, xs, dst);
            dst
        };
        T::gemm(
            o,
            rows,
            l,
            T::one(),
            wt.data(),
            (rows as isize, 1),
            cols,
            (l as isize, 1),
            beta,
            &mut out[s * o * l..(s + 1) * o * l],
            (l as isize, 1),
        );
    }
    let out = Tensor::new(&[n, o, oh, ow], out)?;

    let mut inputs = vec![input, weight];
    inputs.extend(bias);
    let has_bias = bias.is_some();
    Ok(input.tape().record(
        "conv2d",
        &inputs,
        out,
        Box::new(move |inp, _, gout| {
            let (x, wt) = (inp[0], inp[1]);
            let gd = gout.data();
            let mut dw = vec![T::zero(); o * rows];
            let mut dx = vec![T::zero(); n * c * h * w];
            let mut dcols = vec![T::zero(); rows * l];
            for s in 0..n {
                let gs = &gd[s * o * l..(s + 1) * o * l];
                let cols: &[T] = if pointwise {
                    &x.data()[s * c * h * w..(s + 1) * c * h * w]
                } else {
                    &cols_all[s * rows * l..(s + 1) * rows * l]
                };
                // dW += gout_s · cols_sᵀ
                T::gemm(
                    o,
                    l,
                    rows,
                    T::one(),
                    gs,
                    (l as isize, 1),
                    cols,
                    (1, l as isize),
                    T::one(),
                    &mut dw,
                    (rows as isize, 1),
                );
                // dcols = Wᵀ · gout_s
                let dxs = &mut dx[s * c * h * w..(s + 1) * c * h * w];
                if pointwise {
                    T::gemm(
                        rows,
                        o,
                        l,
                        T::one(),
                        wt.data(),
                        (1, rows as isize),
                        gs,
                        (l as isize, 1),
                        T::zero(),
                        dxs,
                        (l as isize, 1),
                    );
                } else {
                    T::gemm(
                        rows,
                        o,
                        l,
                        T::one(),
                        wt.data(),
                        (1, rows as isize),
                        gs,
                        (l as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (l as isize, 1),
                    );
                    col2im(&g, &dcols, dxs);
                }
            }
            let mut grads = vec![
                Some(Tensor::new(&[n, c, h, w], dx).unwrap()),
                Some(Tensor::new(&[o, c, kh, kw], dw).unwrap()),
            ];
            if has_bias {
                let mut db = vec![T::zero(); o];
                for s in 0..n {
                    for (oc, d) in db.iter_mut().enumerate() {
                        *d += gd[(s * o + oc) * l..(s * o + oc + 1) * l].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(Tensor::new(&[o], db).unwrap()));
            }
            grads
        }),
    ))
}

/// Per-sample, per-channel normalization to zero mean and unit variance over
/// the spatial axes (biased variance, no affine parameters).
pub fn instance_norm<'t, T: Real>(input: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
    if eps <= T::zero() {
        return Err(Error::Config("instance_norm eps must be positive".into()));
    }
    let x = input.value();
    let [n, c, h, w] = x.dims4("instance_norm")?;
    let plane = h * w;
    let count = T::from_usize(plane).unwrap();
    let mut out = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); n * c];
    for p in 0..n * c {
        let src = &x.data()[p * plane..(p + 1) * plane];
        let mean = src.iter().copied().sum::<T>() / count;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = (var + eps).sqrt().recip();
        inv_std[p] = inv;
        for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
    }
    let out = Tensor::new(&[n, c, h, w], out)?;
    Ok(input.tape().record(
        "instance_norm",
        &[input],
        out,
        Box::new(move |_, y, g| {
            // dx = inv_std · (g − mean(g) − ŷ · mean(g ⊙ ŷ))
            let mut dx = vec![T::zero(); g.numel()];
            for p in 0..n * c {
                let gs = &g.data()[p * plane..(p + 1) * plane];
                let ys = &y.data()[p * plane..(p + 1) * plane];
                let gm = gs.iter().copied().sum::<T>() / count;
                let gym = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / count;
                for ((d, &gv), &yv) in dx[p * plane..(p + 1) * plane].iter_mut().zip(gs).zip(ys) {
                    *d = inv_std[p] * (gv - gm - yv * gym);
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
        }),
    ))
}

/// `x` for `x >= 0`, `slope * x` otherwise. The derivative at 0 is 1.
pub fn leaky_relu<'t, T: Real>(input: Var<'t, T>, slope: T) -> Var<'t, T> {
    let out = input.value().map(|v| if v >= T::zero() { v } else { slope * v });
    input.tape().record(
        "leaky_relu",
        &[input],
        out,
        Box::new(move |inp, _, g| {
            let d = g
                .zip_map(inp[0], |g, x| if x >= T::zero() { g } else { g * slope })
                .unwrap();
            vec![Some(d)]
        }),
    )
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<'t, T: Real>(input: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let x = input.value();
    if axis >= x.rank() {
        return Err(Error::dim("softmax", "axis", format!("< {}", x.rank()), axis));
    }
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, k| m.max(src[at(k)]));
            let mut total = T::zero();
            for k in 0..len {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    let shape = x.shape().to_vec();
    let out = Tensor::new(&shape, out)?;
    Ok(input.tape().record(
        "softmax",
        &[input],
        out,
        Box::new(move |_, y, g| {
            // dx = y ⊙ (g − Σ g ⊙ y)
            let mut dx = vec![T::zero(); g.numel()];
            let (yd, gd) = (y.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: T = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..len {
                        dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(&shape, dx).unwrap())]
        }),
    ))
}

/// Divide a weight by its largest singular value, estimated with one power
/// iteration started from `u` (length = output channels).
///
/// Returns the normalized weight and the refreshed `u`. The singular vectors
/// are treated as constants in the backward pass, so
/// `dW = (G − ⟨G, W⟩/σ · u vᵀ) / σ`.
pub fn spectral_normalize<'t, T: Real>(
    weight: Var<'t, T>,
    u: &Tensor<T>,
) -> Result<(Var<'t, T>, Tensor<T>)> {
    let wt = weight.value();
    let rows = *wt
        .shape()
        .first()
        .ok_or_else(|| Error::dim("spectral_normalize", "rank", ">= 1", 0))?;
    let cols = wt.numel() / rows.max(1);
    if u.numel() != rows {
        return Err(Error::dim("spectral_normalize", "u length", rows, u.numel()));
    }
    let wd = wt.data();
    let eps = T::lit(1e-12);
    let normalize = |v: &mut [T]| {
        let norm = v.iter().map(|&a| a * a).sum::<T>().sqrt() + eps;
        v.iter_mut().for_each(|a| *a /= norm);
    };
    let mut v = vec![T::zero(); cols];
    for r in 0..rows {
        for (vj, &wv) in v.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
            *vj += wv * u.data()[r];
        }
    }
    normalize(&mut v);
    let mut u_new: Vec<T> = (0..rows)
        .map(|r| wd[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum())
        .collect();
    normalize(&mut u_new);
    let sigma: T = (0..rows)
        .map(|r| {
            u_new[r]
                * wd[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&v)
                    .map(|(&a, &b)| a * b)
                    .sum::<T>()
        })
        .sum::<T>()
        .max(eps);
    let out = wt.map(|a| a / sigma);
    let u_out = Tensor::new(&[rows], u_new.clone())?;
    let var = weight.tape().record(
        "spectral_normalize",
        &[weight],
        out,
        Box::new(move |inp, _, g| {
            let w = inp[0];
            let inner: T = g.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
            let coef = inner / sigma;
            let d = Tensor::from_fn(w.shape(), |i| {
                let (r, j) = (i / cols, i % cols);
                (g.data()[i] - coef * u_new[r] * v[j]) / sigma
            });
            vec![Some(d)]
        }),
    );
    Ok((var, u_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, Tape};

    #[test]
    fn conv_output_size_arithmetic() {
        assert_eq!(conv_out_size(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_size(64, 3, 2, 1), Some(32));
        assert_eq!(conv_out_size(2, 5, 1, 0), None);
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 - 4.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = conv2d(x, w, Some(b), 1, 1).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::<f32>::new();
        let data = Tensor::from_fn(&[1, 1, 4, 5], |i| (i as f32).sin());
        let x = tape.constant(data.clone());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(y.value(), data);
    }

    #[test]
    fn conv_reports_channel_axis() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 3], 7.5));
        let y = instance_norm(x, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_moments() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 37) % 11) as f64 * 0.3 - 1.0));
        let y = instance_norm(x, 1e-5).unwrap().value();
        for p in 0..6 {
            let s = &y.data()[p * 16..(p + 1) * 16];
            let mean = s.iter().sum::<f64>() / 16.0;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn leaky_relu_values() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -1.0, 0.0]).unwrap());
        let y = leaky_relu(x, 0.2);
        assert_eq!(y.value().data(), &[1.0, -0.2, 0.0]);
        let g = tape.backward(ops::sum(y)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.2, 1.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 4, 1, 1], 3.0));
        let y = softmax(x, 1).unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = tape.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = softmax(x, 0).unwrap().value();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }
}
