//! Spatial transformation operators: flow-driven bilinear sampling, patch
//! extraction around flowed positions, local attention over those patches
//! and occlusion-aware fusion.
//!
//! A flow field `w` has shape `[n, 2, h, w]`; channel 0 is Δx, channel 1 is
//! Δy, both in pixels of the grid being sampled. Output location `l = (x, y)`
//! reads the input at `l + w(l)`. Sampling outside the input contributes
//! zero. Patch taps are ordered row-major over the window, `dy` outer and
//! `dx` inner.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Flow field tensor `[n, 2, h, w]` with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T>(Tensor<T>);

impl<T: Real> FlowField<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let [_, c, _, _] = t.dims4("FlowField")?;
        if c != 2 {
            return Err(Error::dim("FlowField", "channels", 2, c));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("FlowField".into()));
        }
        Ok(FlowField(t))
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(&[n, 2, h, w]))
    }

    /// Same offset everywhere.
    pub fn constant(n: usize, h: usize, w: usize, dx: T, dy: T) -> Self {
        let plane = h * w;
        FlowField(Tensor::from_fn(&[n, 2, h, w], |i| {
            if (i / plane) % 2 == 0 {
                dx
            } else {
                dy
            }
        }))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0.dims4("FlowField").expect("validated at construction")
    }

    /// `(Δx, Δy)` at batch item `n`, pixel `(x, y)`.
    pub fn at(&self, n: usize, x: usize, y: usize) -> (T, T) {
        let t = &self.0;
        (t.data()[t.idx4(n, 0, y, x)], t.data()[t.idx4(n, 1, y, x)])
    }

    /// Bilinear resize to `h × w` with offsets rescaled to the new grid.
    ///
    /// Output pixel `X` reads input position `X · in / out` (the convention
    /// of stride-`k` convolutions, whose output `i` is centered on input
    /// `k·i`), clamped to the input border.
    pub fn resize(&self, h: usize, w: usize) -> Result<Self> {
        let [n, _, ih, iw] = self.dims();
        if h == 0 || w == 0 {
            return Err(Error::Config("resize target must be non-empty".into()));
        }
        let sx = iw as f64 / w as f64;
        let sy = ih as f64 / h as f64;
        let mut out = vec![T::zero(); n * 2 * h * w];
        for b in 0..n {
            for y in 0..h {
                let py = (y as f64 * sy).min((ih - 1) as f64);
                for x in 0..w {
                    let px = (x as f64 * sx).min((iw - 1) as f64);
                    for (c, scale) in [(0, 1.0 / sx), (1, 1.0 / sy)] {
                        let plane = &self.0.data()[(b * 2 + c) * ih * iw..][..ih * iw];
                        let v = sample_clamped(plane, ih, iw, px, py);
                        out[((b * 2 + c) * h + y) * w + x] = T::lit(v * scale);
                    }
                }
            }
        }
        FlowField::new(Tensor::new(&[n, 2, h, w], out)?)
    }
}

fn sample_clamped<T: Real>(plane: &[T], h: usize, w: usize, px: f64, py: f64) -> f64 {
    let x0 = px.floor().clamp(0.0, (w - 1) as f64);
    let y0 = py.floor().clamp(0.0, (h - 1) as f64);
    let (ax, ay) = (px - x0, py - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let f = |x: usize, y: usize| plane[y * w + x].as_f64();
    (1.0 - ay) * ((1.0 - ax) * f(x0, y0) + ax * f(x1, y0)) + ay * ((1.0 - ax) * f(x0, y1) + ax * f(x1, y1))
}

/// Soft occlusion mask `[n, 1, h, w]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask<T>(Tensor<T>);

impl<T: Real> OcclusionMask<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let [_, c, _, _] = t.dims4("OcclusionMask")?;
        if c != 1 {
            return Err(Error::dim("OcclusionMask", "channels", 1, c));
        }
        check_unit_range("OcclusionMask", &t)?;
        Ok(OcclusionMask(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

fn check_unit_range<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if let Some(bad) = t.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Contract {
            op,
            detail: format!("mask value {bad} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Pixel coordinates `[2, h, w]`: channel 0 holds x, channel 1 holds y.
pub fn coord_grid<T: Real>(height: usize, width: usize) -> Tensor<T> {
    let plane = height * width;
    Tensor::from_fn(&[2, height, width], |i| {
        let p = i % plane;
        if i < plane {
            T::from_usize(p % width).unwrap()
        } else {
            T::from_usize(p / width).unwrap()
        }
    })
}

/// Four-neighbour footprint of a fractional position.
#[derive(Clone, Copy)]
struct Footprint<T> {
    x0: isize,
    y0: isize,
    ax: T,
    ay: T,
}

impl<T: Real> Footprint<T> {
    #[inline]
    fn at(px: T, py: T) -> Self {
        let (fx, fy) = (px.floor(), py.floor());
        Footprint {
            x0: fx.to_isize().unwrap_or(isize::MIN / 2),
            y0: fy.to_isize().unwrap_or(isize::MIN / 2),
            ax: px - fx,
            ay: py - fy,
        }
    }

    /// `(x, y, weight)` of the four taps, in the order 00, 10, 01, 11.
    #[inline]
    fn taps(&self) -> [(isize, isize, T); 4] {
        let one = T::one();
        let (ax, ay) = (self.ax, self.ay);
        [
            (self.x0, self.y0, (one - ax) * (one - ay)),
            (self.x0 + 1, self.y0, ax * (one - ay)),
            (self.x0, self.y0 + 1, (one - ax) * ay),
            (self.x0 + 1, self.y0 + 1, ax * ay),
        ]
    }
}

#[inline]
fn inside(x: isize, y: isize, h: usize, w: usize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h
}

#[inline]
fn fetch<T: Real>(plane: &[T], h: usize, w: usize, x: isize, y: isize) -> T {
    if inside(x, y, h, w) {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// Interpolated value. Only taps with nonzero weight are touched, so an
/// integer position returns the stored value bit for bit.
#[inline]
fn interpolate<T: Real>(plane: &[T], h: usize, w: usize, fp: &Footprint<T>) -> T {
    let mut acc: Option<T> = None;
    for (x, y, wt) in fp.taps() {
        if wt != T::zero() && inside(x, y, h, w) {
            let v = wt * plane[y as usize * w + x as usize];
            acc = Some(match acc {
                Some(a) => a + v,
                None => v,
            });
        }
    }
    acc.unwrap_or_else(T::zero)
}

/// Check shapes and return `(n, c, fh, fw, h, w)`.
fn sampling_dims<T: Real>(
    op: &'static str,
    feature: &Tensor<T>,
    flow: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let [n, c, fh, fw] = feature.dims4(op)?;
    let [fnb, fc, h, w] = flow.dims4(op)?;
    if fnb != n {
        return Err(Error::dim(op, "flow batch", n, fnb));
    }
    if fc != 2 {
        return Err(Error::dim(op, "flow channels", 2, fc));
    }
    Ok((n, c, fh, fw, h, w))
}

fn patch_offsets<T: Real>(n: usize) -> Result<Vec<(T, T)>> {
    if n % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {n}")));
    }
    let r = (n / 2) as isize;
    Ok((-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (T::from_isize(dx).unwrap(), T::from_isize(dy).unwrap())))
        .collect())
}

/// Forward of flowed sampling at a set of offsets: `[n, c, k, h, w]`.
fn sample_offsets_forward<T: Real>(feature: &Tensor<T>, flow: &Tensor<T>, offsets: &[(T, T)]) -> Tensor<T> {
    let (n, c, fh, fw, h, w) = sampling_dims("sample", feature, flow).expect("validated");
    let k = offsets.len();
    let plane = h * w;
    let mut out = vec![T::zero(); n * c * k * plane];
    for b in 0..n {
        let fx = &flow.data()[(b * 2) * plane..][..plane];
        let fy = &flow.data()[(b * 2 + 1) * plane..][..plane];
        for (j, &(ox, oy)) in offsets.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let l = y * w + x;
                    let px = T::from_usize(x).unwrap() + fx[l] + ox;
                    let py = T::from_usize(y).unwrap() + fy[l] + oy;
                    let fp = Footprint::at(px, py);
                    for ch in 0..c {
                        let src = &feature.data()[(b * c + ch) * fh * fw..][..fh * fw];
                        out[((b * c + ch) * k + j) * plane + l] = interpolate(src, fh, fw, &fp);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, k, h, w], out).expect("sized")
}

/// Backward of flowed sampling: gradients for feature and flow given the
/// output gradient `[n, c, k, h, w]`.
///
/// Flow gradient per tap: `∂/∂Δx = (1−a_y)(f₁₀−f₀₀) + a_y(f₁₁−f₀₁)` and
/// symmetrically for Δy; the feature gradient scatters the bilinear weights.
fn sample_offsets_backward<T: Real>(
    feature: &Tensor<T>,
    flow: &Tensor<T>,
    offsets: &[(T, T)],
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, fh, fw, h, w) = sampling_dims("sample", feature, flow).expect("validated");
    let k = offsets.len();
    let plane = h * w;
    let one = T::one();
    let mut dfeat = vec![T::zero(); feature.numel()];
    let mut dflow = vec![T::zero(); flow.numel()];
    for b in 0..n {
        for (j, &(ox, oy)) in offsets.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let l = y * w + x;
                    let ix = (b * 2) * plane + l;
                    let iy = (b * 2 + 1) * plane + l;
                    let px = T::from_usize(x).unwrap() + flow.data()[ix] + ox;
                    let py = T::from_usize(y).unwrap() + flow.data()[iy] + oy;
                    let fp = Footprint::at(px, py);
                    let taps = fp.taps();
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let g = gout.data()[((b * c + ch) * k + j) * plane + l];
                        if g == T::zero() {
                            continue;
                        }
                        let base = (b * c + ch) * fh * fw;
                        let src = &feature.data()[base..base + fh * fw];
                        let f00 = fetch(src, fh, fw, fp.x0, fp.y0);
                        let f10 = fetch(src, fh, fw, fp.x0 + 1, fp.y0);
                        let f01 = fetch(src, fh, fw, fp.x0, fp.y0 + 1);
                        let f11 = fetch(src, fh, fw, fp.x0 + 1, fp.y0 + 1);
                        gx += g * ((one - fp.ay) * (f10 - f00) + fp.ay * (f11 - f01));
                        gy += g * ((one - fp.ax) * (f01 - f00) + fp.ax * (f11 - f10));
                        for &(tx, ty, wt) in &taps {
                            if inside(tx, ty, fh, fw) {
                                dfeat[base + ty as usize * fw + tx as usize] += g * wt;
                            }
                        }
                    }
                    dflow[ix] += gx;
                    dflow[iy] += gy;
                }
            }
        }
    }
    (
        Tensor::new(feature.shape(), dfeat).expect("sized"),
        Tensor::new(flow.shape(), dflow).expect("sized"),
    )
}

fn flowed_sampling<'t, T: Real>(
    op: &'static str,
    feature: Var<'t, T>,
    flow: Var<'t, T>,
    offsets: Vec<(T, T)>,
    out_shape: Vec<usize>,
) -> Result<Var<'t, T>> {
    let (fv, wv) = (feature.value(), flow.value());
    sampling_dims(op, &fv, &wv)?;
    let out = sample_offsets_forward(&fv, &wv, &offsets).reshape(&out_shape)?;
    Ok(feature.tape().record(
        op,
        &[feature, flow],
        out,
        Box::new(move |inp, _, g| {
            let [n, c, h, w] = [inp[0].shape()[0], inp[0].shape()[1], inp[1].shape()[2], inp[1].shape()[3]];
            let g = g.reshape(&[n, c, offsets.len(), h, w]).expect("sized");
            let (df, dw) = sample_offsets_backward(inp[0], inp[1], &offsets, &g);
            vec![Some(df), Some(dw)]
        }),
    ))
}

/// Bilinear sampling of `feature` (`[n, c, fh, fw]`) at `l + flow(l)` for
/// every location of the flow grid; output is `[n, c, h, w]`.
pub fn bilinear_sample<'t, T: Real>(feature: Var<'t, T>, flow: Var<'t, T>) -> Result<Var<'t, T>> {
    let [n, c, ..] = feature.value().dims4("bilinear_sample")?;
    let [_, _, h, w] = flow.value().dims4("bilinear_sample")?;
    flowed_sampling("bilinear_sample", feature, flow, vec![(T::zero(), T::zero())], vec![n, c, h, w])
}

/// Tape-free bilinear warp.
pub fn warp<T: Real>(feature: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    let [n, c, ..] = feature.dims4("warp")?;
    let [_, _, h, w] = flow.dims();
    sampling_dims("warp", feature, flow.tensor())?;
    sample_offsets_forward(feature, flow.tensor(), &[(T::zero(), T::zero())]).reshape(&[n, c, h, w])
}

/// `n × n` patches of `feature` centered on the flowed positions, each tap
/// bilinearly sampled: `[n, c, n·n, h, w]`.
pub fn extract_flowed_patches<'t, T: Real>(
    feature: Var<'t, T>,
    flow: Var<'t, T>,
    n: usize,
) -> Result<Var<'t, T>> {
    let offsets = patch_offsets(n)?;
    let [b, c, ..] = feature.value().dims4("extract_flowed_patches")?;
    let [_, _, h, w] = flow.value().dims4("extract_flowed_patches")?;
    let k = offsets.len();
    flowed_sampling("extract_flowed_patches", feature, flow, offsets, vec![b, c, k, h, w])
}

/// Integer-grid `n × n` unfold with zero padding: `[b, c, n·n, h, w]`.
pub fn extract_target_patches<'t, T: Real>(feature: Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
    if n % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {n}")));
    }
    let fv = feature.value();
    let [b, c, h, w] = fv.dims4("extract_target_patches")?;
    let r = (n / 2) as isize;
    let k = n * n;
    let plane = h * w;
    // (dx, dy) per tap, row-major
    let offs: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
    let mut out = vec![T::zero(); b * c * k * plane];
    for p in 0..b * c {
        let src = &fv.data()[p * plane..(p + 1) * plane];
        for (j, &(dx, dy)) in offs.iter().enumerate() {
            let dst = &mut out[(p * k + j) * plane..][..plane];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = fetch(src, h, w, x as isize + dx, y as isize + dy);
                }
            }
        }
    }
    let out = Tensor::new(&[b, c, k, h, w], out)?;
    Ok(feature.tape().record(
        "extract_target_patches",
        &[feature],
        out,
        Box::new(move |_, _, g| {
            let mut d = vec![T::zero(); b * c * plane];
            for p in 0..b * c {
                let dst = &mut d[p * plane..(p + 1) * plane];
                for (j, &(dx, dy)) in offs.iter().enumerate() {
                    let src = &g.data()[(p * k + j) * plane..][..plane];
                    for y in 0..h {
                        for x in 0..w {
                            let (sx, sy) = (x as isize + dx, y as isize + dy);
                            if inside(sx, sy, h, w) {
                                dst[sy as usize * w + sx as usize] += src[y * w + x];
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], d).unwrap())]
        }),
    ))
}

/// Content-aware attention: `out[c, l] = Σ_j kernels[j, l] · patches[c, j, l]`.
///
/// With softmax-normalized kernels this is a convex combination of the
/// patch taps.
pub fn local_attention_warp<'t, T: Real>(patches: Var<'t, T>, kernels: Var<'t, T>) -> Result<Var<'t, T>> {
    let (pv, kv) = (patches.value(), kernels.value());
    let &[b, c, k, h, w] = pv.shape() else {
        return Err(Error::dim("local_attention_warp", "patch rank", 5, pv.rank()));
    };
    let expect = [b, k, h, w];
    if kv.shape() != expect {
        return Err(Error::dim(
            "local_attention_warp",
            "kernel shape (patch axis)",
            format!("{expect:?}"),
            format!("{:?}", kv.shape()),
        ));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); b * c * plane];
    for bi in 0..b {
        for ch in 0..c {
            let dst = &mut out[(bi * c + ch) * plane..][..plane];
            for j in 0..k {
                let pk = &pv.data()[((bi * c + ch) * k + j) * plane..][..plane];
                let kk = &kv.data()[(bi * k + j) * plane..][..plane];
                for ((d, &p), &q) in dst.iter_mut().zip(pk).zip(kk) {
                    *d += p * q;
                }
            }
        }
    }
    let out = Tensor::new(&[b, c, h, w], out)?;
    Ok(patches.tape().record(
        "local_attention_warp",
        &[patches, kernels],
        out,
        Box::new(move |inp, _, g| {
            let (pv, kv) = (inp[0], inp[1]);
            let mut dp = vec![T::zero(); pv.numel()];
            let mut dk = vec![T::zero(); kv.numel()];
            for bi in 0..b {
                for ch in 0..c {
                    let gs = &g.data()[(bi * c + ch) * plane..][..plane];
                    for j in 0..k {
                        let po = ((bi * c + ch) * k + j) * plane;
                        let ko = (bi * k + j) * plane;
                        for l in 0..plane {
                            dp[po + l] = gs[l] * kv.data()[ko + l];
                            dk[ko + l] += gs[l] * pv.data()[po + l];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(pv.shape(), dp).unwrap()),
                Some(Tensor::new(kv.shape(), dk).unwrap()),
            ]
        }),
    ))
}

/// `(1 − m)·f_target + m·f_attn` with the mask broadcast over channels.
pub fn occlusion_fuse<'t, T: Real>(
    f_target: Var<'t, T>,
    f_attn: Var<'t, T>,
    mask: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (ft, fa, m) = (f_target.value(), f_attn.value(), mask.value());
    let [b, c, h, w] = ft.dims4("occlusion_fuse")?;
    fa.expect_shape("occlusion_fuse", ft.shape())?;
    m.expect_shape("occlusion_fuse", &[b, 1, h, w])?;
    check_unit_range("occlusion_fuse", &m)?;
    let plane = h * w;
    let one = T::one();
    let out = Tensor::from_fn(&[b, c, h, w], |i| {
        let (bi, l) = (i / (c * plane), i % plane);
        let mv = m.data()[bi * plane + l];
        (one - mv) * ft.data()[i] + mv * fa.data()[i]
    });
    Ok(f_target.tape().record(
        "occlusion_fuse",
        &[f_target, f_attn, mask],
        out,
        Box::new(move |inp, _, g| {
            let (ft, fa, m) = (inp[0], inp[1], inp[2]);
            let mut dm = vec![T::zero(); m.numel()];
            let mut dt = vec![T::zero(); ft.numel()];
            let mut da = vec![T::zero(); fa.numel()];
            for i in 0..ft.numel() {
                let (bi, l) = (i / (c * plane), i % plane);
                let mv = m.data()[bi * plane + l];
                let gv = g.data()[i];
                dt[i] = (one - mv) * gv;
                da[i] = mv * gv;
                dm[bi * plane + l] += gv * (fa.data()[i] - ft.data()[i]);
            }
            vec![
                Some(Tensor::new(ft.shape(), dt).unwrap()),
                Some(Tensor::new(fa.shape(), da).unwrap()),
                Some(Tensor::new(m.shape(), dm).unwrap()),
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, Tape};

    #[test]
    fn coord_grid_layout() {
        let g = coord_grid::<f64>(2, 3);
        assert_eq!(g.shape(), &[2, 2, 3]);
        assert_eq!(g.data(), &[0., 1., 2., 0., 1., 2., 0., 0., 0., 1., 1., 1.]);
        assert_eq!(coord_grid::<f32>(1, 1).data(), &[0.0, 0.0]);
    }

    #[test]
    fn center_of_2x2_is_mean() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let w = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap());
        let out = bilinear_sample(f, w).unwrap().value();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.item(), 2.5);
    }

    #[test]
    fn zero_flow_is_identity_including_negative_zero() {
        let tape = Tape::<f32>::new();
        let data = Tensor::new(&[1, 1, 2, 2], vec![-0.0, 1.5, -2.25, 3.0]).unwrap();
        let f = tape.constant(data.clone());
        let w = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let out = bilinear_sample(f, w).unwrap().value();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&data));
    }

    #[test]
    fn far_out_of_bounds_is_zero_with_zero_gradient() {
        let tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 + 1.0));
        let w = tape.leaf(FlowField::constant(1, 4, 4, 5.5, -1.25).into_tensor());
        let out = bilinear_sample(f, w).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
        let g = tape.backward(ops::sum(out)).unwrap();
        assert!(g.get(f).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_batch_mismatch_is_error() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(bilinear_sample(f, w), Err(Error::Dim { .. })));
    }

    #[test]
    fn single_tap_patch_matches_bilinear() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64 * 0.7).sin()));
        let w = tape.constant(Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64 * 0.3).cos()));
        let a = bilinear_sample(f, w).unwrap().value();
        let p = extract_flowed_patches(f, w, 1).unwrap().value();
        assert_eq!(p.shape(), &[1, 2, 1, 5, 5]);
        assert_eq!(p.data(), a.data());
    }

    #[test]
    fn integer_flow_patch_is_shifted_neighbourhood() {
        let tape = Tape::<f64>::new();
        let data = Tensor::from_fn(&[1, 1, 7, 7], |i| i as f64);
        let f = tape.constant(data.clone());
        let w = tape.constant(FlowField::constant(1, 7, 7, 1.0, -1.0).into_tensor());
        let p = extract_flowed_patches(f, w, 3).unwrap().value();
        // location (2, 3) samples around (3, 2)
        let (x, y) = (2usize, 3usize);
        for j in 0..9 {
            let (dx, dy) = (j % 3, j / 3);
            let src = data.data()[(y - 1 - 1 + dy) * 7 + (x + 1 - 1 + dx)];
            assert_eq!(p.data()[j * 49 + y * 7 + x], src);
        }
    }

    #[test]
    fn even_patch_size_is_config_error() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(matches!(extract_flowed_patches(f, w, 2), Err(Error::Config(_))));
        assert!(matches!(extract_target_patches(f, 4), Err(Error::Config(_))));
    }

    #[test]
    fn target_patches_count_and_constant() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::full(&[1, 1, 5, 5], 3.0));
        let p = extract_target_patches(f, 3).unwrap().value();
        // interior location (2, 2): every tap is 3
        for j in 0..9 {
            assert_eq!(p.data()[j * 25 + 12], 3.0);
        }
        // corner (0, 0): taps reaching outside are zero-padded
        assert_eq!(p.data()[0], 0.0);
        assert_eq!(p.data()[4 * 25], 3.0);
        let ones = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
        let p = extract_target_patches(ones, 3).unwrap().value();
        let total: f64 = (0..9).map(|j| p.data()[j * 25 + 12]).sum();
        assert_eq!(total, 9.0);
        let p1 = extract_target_patches(ones, 1).unwrap().value();
        assert_eq!(p1.shape(), &[1, 1, 1, 5, 5]);
    }

    #[test]
    fn uniform_kernel_is_patch_mean() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_fn(&[1, 2, 9, 2, 2], |i| i as f64));
        let k = tape.constant(Tensor::full(&[1, 9, 2, 2], 1.0 / 9.0));
        let out = local_attention_warp(p, k).unwrap().value();
        let pv = p.value();
        for ch in 0..2 {
            for l in 0..4 {
                let mean: f64 = (0..9).map(|j| pv.data()[(ch * 9 + j) * 4 + l]).sum::<f64>() / 9.0;
                assert!((out.data()[ch * 4 + l] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_endpoints_and_midpoint() {
        let tape = Tape::<f64>::new();
        let ft = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let fa = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| -(i as f64) * 3.0));
        let ones = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let zeros = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert_eq!(occlusion_fuse(ft, fa, ones).unwrap().value(), fa.value());
        assert_eq!(occlusion_fuse(ft, fa, zeros).unwrap().value(), ft.value());
        let z = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let two = tape.constant(Tensor::full(&[1, 2, 2, 2], 2.0));
        let half = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        let mid = occlusion_fuse(z, two, half).unwrap().value();
        assert!(mid.data().iter().all(|&v| v == 1.0));
        let bad = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.5));
        assert!(matches!(occlusion_fuse(ft, fa, bad), Err(Error::Contract { .. })));
    }

    #[test]
    fn resize_constant_flow_scales_offsets() {
        let f = FlowField::<f32>::constant(1, 8, 8, 1.0, -0.5);
        let up = f.resize(16, 32).unwrap();
        assert_eq!(up.dims(), [1, 2, 16, 32]);
        assert_eq!(up.at(0, 31, 15), (4.0, -1.0));
    }
}
