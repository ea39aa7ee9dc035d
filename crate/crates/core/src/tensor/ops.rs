//! Elementwise, reduction and layout operators on tape variables.

use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape<T: Real>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::dim(op, "shape", format!("{sa:?}"), format!("{sb:?}")));
    }
    Ok(())
}

/// Shared implementation of unary elementwise ops. `deriv(x, y)` returns
/// dy/dx given the input and output element.
fn unary<'t, T: Real>(
    op: &'static str,
    x: Var<'t, T>,
    f: impl Fn(T) -> T,
    deriv: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let out = x.value().map(f);
    x.tape().record(
        op,
        &[x],
        out,
        Box::new(move |inp, out, g| {
            let d = Tensor::from_fn(g.shape(), |i| {
                g.data()[i] * deriv(inp[0].data()[i], out.data()[i])
            });
            vec![Some(d)]
        }),
    )
}

pub fn add<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("add", a, b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x + y)?;
    Ok(a.tape().record(
        "add",
        &[a, b],
        out,
        Box::new(|_, _, g| vec![Some(g.clone()), Some(g.clone())]),
    ))
}

pub fn sub<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("sub", a, b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x - y)?;
    Ok(a.tape().record(
        "sub",
        &[a, b],
        out,
        Box::new(|_, _, g| vec![Some(g.clone()), Some(g.map(|v| -v))]),
    ))
}

pub fn mul<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("mul", a, b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x * y)?;
    Ok(a.tape().record(
        "mul",
        &[a, b],
        out,
        Box::new(|inp, _, g| {
            vec![
                Some(g.zip_map(inp[1], |g, y| g * y).unwrap()),
                Some(g.zip_map(inp[0], |g, x| g * x).unwrap()),
            ]
        }),
    ))
}

pub fn scale<'t, T: Real>(x: Var<'t, T>, s: T) -> Var<'t, T> {
    unary("scale", x, move |v| v * s, move |_, _| s)
}

pub fn add_scalar<'t, T: Real>(x: Var<'t, T>, s: T) -> Var<'t, T> {
    unary("add_scalar", x, move |v| v + s, |_, _| T::one())
}

pub fn abs<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    // sign(0) = 0, the minimum-norm subgradient
    unary("abs", x, |v| v.abs(), |x, _| {
        if x > T::zero() {
            T::one()
        } else if x < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    })
}

pub fn exp<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary("exp", x, |v| v.exp(), |_, y| y)
}

pub fn log<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary("log", x, |v| v.ln(), |x, _| x.recip())
}

pub fn square<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary("square", x, |v| v * v, |x, _| x + x)
}

pub fn sigmoid<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary("sigmoid", x, sigmoid_scalar, |_, y| y * (T::one() - y))
}

pub fn tanh<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
}

/// `log(1 + exp(x))`, evaluated without overflow.
pub fn softplus<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    unary("softplus", x, softplus_scalar, |x, _| sigmoid_scalar(x))
}

pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_scalar<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Sum of all elements, as a rank-0 tensor.
pub fn sum<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let out = Tensor::scalar(x.value().sum());
    x.tape().record(
        "sum",
        &[x],
        out,
        Box::new(|inp, _, g| vec![Some(Tensor::full(inp[0].shape(), g.item()))]),
    )
}

/// Mean of all elements, as a rank-0 tensor.
pub fn mean<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let v = x.value();
    let n = T::from_usize(v.numel().max(1)).unwrap();
    let out = Tensor::scalar(v.sum() / n);
    x.tape().record(
        "mean",
        &[x],
        out,
        Box::new(move |inp, _, g| vec![Some(Tensor::full(inp[0].shape(), g.item() / n))]),
    )
}

/// Weighted sum `Σ w_i · x_i` of same-shape variables.
pub fn weighted_sum<'t, T: Real>(terms: &[(T, Var<'t, T>)]) -> Result<Var<'t, T>> {
    let (_, first) = *terms
        .first()
        .ok_or_else(|| Error::Empty("weighted_sum of no terms".into()))?;
    let shape = first.shape();
    let mut acc = Tensor::zeros(&shape);
    for &(w, v) in terms {
        same_shape("weighted_sum", first, v)?;
        let val = v.value();
        for (a, &b) in acc.data_mut().iter_mut().zip(val.data()) {
            *a += w * b;
        }
    }
    let weights: Vec<T> = terms.iter().map(|t| t.0).collect();
    let vars: Vec<Var<'t, T>> = terms.iter().map(|t| t.1).collect();
    Ok(first.tape().record(
        "weighted_sum",
        &vars,
        acc,
        Box::new(move |_, _, g| weights.iter().map(|&w| Some(g.scale(w))).collect()),
    ))
}

pub fn reshape<'t, T: Real>(x: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let out = x.value().reshape(shape)?;
    Ok(x.tape().record(
        "reshape",
        &[x],
        out,
        Box::new(|inp, _, g| vec![Some(g.reshape(inp[0].shape()).unwrap())]),
    ))
}

/// Concatenate rank-4 variables along the channel axis.
pub fn concat_channels<'t, T: Real>(xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Empty("concat_channels of no inputs".into()))?;
    let vals: Vec<Tensor<T>> = xs.iter().map(|v| v.value()).collect();
    let [n, _, h, w] = vals[0].dims4("concat_channels")?;
    let mut chans = Vec::with_capacity(vals.len());
    for v in &vals {
        let [vn, vc, vh, vw] = v.dims4("concat_channels")?;
        if (vn, vh, vw) != (n, h, w) {
            return Err(Error::dim(
                "concat_channels",
                "batch/spatial",
                format!("{:?}", (n, h, w)),
                format!("{:?}", (vn, vh, vw)),
            ));
        }
        chans.push(vc);
    }
    let total: usize = chans.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (v, &c) in vals.iter().zip(&chans) {
            out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let out = Tensor::new(&[n, total, h, w], out)?;
    Ok(first.tape().record(
        "concat_channels",
        xs,
        out,
        Box::new(move |_, _, g| {
            let mut grads: Vec<Vec<T>> = chans
                .iter()
                .map(|&c| Vec::with_capacity(n * c * plane))
                .collect();
            let mut off = 0;
            for _ in 0..n {
                for (gi, &c) in grads.iter_mut().zip(&chans) {
                    gi.extend_from_slice(&g.data()[off..off + c * plane]);
                    off += c * plane;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(d, &c)| Some(Tensor::new(&[n, c, h, w], d).unwrap()))
                .collect()
        }),
    ))
}

/// Channels `start..start+len` of a rank-4 variable.
pub fn slice_channels<'t, T: Real>(x: Var<'t, T>, start: usize, len: usize) -> Result<Var<'t, T>> {
    let v = x.value();
    let [n, c, h, w] = v.dims4("slice_channels")?;
    if start + len > c {
        return Err(Error::dim("slice_channels", "channel", format!("<= {c}"), start + len));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let base = (b * c + start) * plane;
        out.extend_from_slice(&v.data()[base..base + len * plane]);
    }
    let out = Tensor::new(&[n, len, h, w], out)?;
    Ok(x.tape().record(
        "slice_channels",
        &[x],
        out,
        Box::new(move |_, _, g| {
            let mut d = Tensor::zeros(&[n, c, h, w]);
            let dd = d.data_mut();
            for b in 0..n {
                let dst = (b * c + start) * plane;
                let src = b * len * plane;
                dd[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
            }
            vec![Some(d)]
        }),
    ))
}

/// Nearest-neighbour upsampling of a rank-4 variable by an integer factor.
pub fn upsample_nearest<'t, T: Real>(x: Var<'t, T>, factor: usize) -> Result<Var<'t, T>> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be positive".into()));
    }
    let v = x.value();
    let [n, c, h, w] = v.dims4("upsample_nearest")?;
    let (oh, ow) = (h * factor, w * factor);
    let src = v.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = src[(p * h + y / factor) * w + xx / factor];
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    Ok(x.tape().record(
        "upsample_nearest",
        &[x],
        out,
        Box::new(move |_, _, g| {
            let mut d = vec![T::zero(); n * c * h * w];
            let gd = g.data();
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        d[(p * h + y / factor) * w + xx / factor] += gd[(p * oh + y) * ow + xx];
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], d).unwrap())]
        }),
    ))
}

/// 2×2 average pooling with stride 2 (odd trailing rows/columns dropped).
pub fn avg_pool2<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let v = x.value();
    let [n, c, h, w] = v.dims4("avg_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let src = v.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let b = (p * h + 2 * y) * w + 2 * xx;
                out[(p * oh + y) * ow + xx] = (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]) * quarter;
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    Ok(x.tape().record(
        "avg_pool2",
        &[x],
        out,
        Box::new(move |_, _, g| {
            let mut d = vec![T::zero(); n * c * h * w];
            let gd = g.data();
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let gv = gd[(p * oh + y) * ow + xx] * quarter;
                        let b = (p * h + 2 * y) * w + 2 * xx;
                        d[b] += gv;
                        d[b + 1] += gv;
                        d[b + w] += gv;
                        d[b + w + 1] += gv;
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], d).unwrap())]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus_scalar(1000.0f64), 1000.0);
        assert!(softplus_scalar(-1000.0f64) >= 0.0);
        assert!((softplus_scalar(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 2, 2, 2], |i| 100.0 + i as f64));
        let cat = concat_channels(&[a, b]).unwrap();
        assert_eq!(cat.shape(), vec![2, 3, 2, 2]);
        let back = slice_channels(cat, 1, 2).unwrap();
        assert_eq!(back.value(), b.value());
        let g = tape.backward(sum(back)).unwrap();
        assert_eq!(g.get(a).unwrap().sum(), 0.0);
        assert_eq!(g.get(b).unwrap().sum(), 16.0);
    }

    #[test]
    fn upsample_gradient_sums_blocks() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 2, 2]));
        let up = upsample_nearest(x, 3).unwrap();
        assert_eq!(up.shape(), vec![1, 1, 6, 6]);
        let g = tape.backward(sum(up)).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn weighted_sum_is_linear() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(3.0));
        let s = weighted_sum(&[(0.5, a), (4.0, b)]).unwrap();
        assert_eq!(s.value().item(), 13.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 0.5);
        assert_eq!(g.get(b).unwrap().item(), 4.0);
    }
}
