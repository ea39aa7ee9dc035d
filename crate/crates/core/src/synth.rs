//! Procedural deformation pairs with ground-truth backward flow, visibility
//! and structure guidance, plus the flow and image metrics used to score
//! models on them.
//!
//! Every pixel is rendered analytically from a surface texture expressed in
//! source coordinates: the source shows each surface at its own position,
//! the target shows it through a backward map `u = B(x)`. The ground-truth
//! flow is `B(x) − x`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::warp::FlowField;

/// Backward affine map `u = A·x + t` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Affine {
            t: [dx, dy],
            ..Self::IDENTITY
        }
    }

    /// Rotation by `angle` (radians), isotropic `scale` and `shear` about
    /// `center`, followed by `shift`.
    pub fn about(center: [f64; 2], angle: f64, scale: f64, shear: f64, shift: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let a = [[scale * c, scale * (-s + shear)], [scale * s, scale * c]];
        let t = [
            center[0] - a[0][0] * center[0] - a[0][1] * center[1] + shift[0],
            center[1] - a[1][0] * center[0] - a[1][1] * center[1] + shift[1],
        ];
        Affine { a, t }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return Err(Error::Singular("affine map is not invertible".into()));
        }
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Ok(Affine { a: inv, t })
    }

    /// `[[a00, a01, t0], [a10, a11, t1]]`.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [
            [self.a[0][0], self.a[0][1], self.t[0]],
            [self.a[1][0], self.a[1][1], self.t[1]],
        ]
    }
}

/// Ranges for randomly drawn affine motions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionRange {
    pub max_rotation_deg: f64,
    pub max_log_scale: f64,
    pub max_shear: f64,
    pub max_shift: f64,
}

impl Default for MotionRange {
    fn default() -> Self {
        MotionRange {
            max_rotation_deg: 10.0,
            max_log_scale: 0.1,
            max_shear: 0.05,
            max_shift: 4.0,
        }
    }
}

impl MotionRange {
    fn draw(&self, center: [f64; 2], rng: &mut ChaCha8Rng) -> Affine {
        let angle = sym(rng, self.max_rotation_deg).to_radians();
        let scale = sym(rng, self.max_log_scale).exp();
        let shear = sym(rng, self.max_shear);
        let shift = [sym(rng, self.max_shift), sym(rng, self.max_shift)];
        Affine::about(center, angle, scale, shear, shift)
    }
}

fn sym(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        rng.random_range(-half..=half)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Deformation {
    /// One backward map over the whole frame; `fixed` overrides the draw.
    GlobalAffine {
        #[serde(default)]
        range: MotionRange,
        #[serde(default)]
        fixed: Option<Affine>,
    },
    /// Textured convex polygons over a static background, each moved by its
    /// own affine map; higher part index is in front.
    PerPartAffine {
        parts: usize,
        #[serde(default = "part_range")]
        range: MotionRange,
    },
    /// Low-frequency sinusoidal displacement field.
    SmoothNonrigid {
        amplitude: f64,
        #[serde(default = "nonrigid_wavelength")]
        min_wavelength: f64,
    },
}

fn part_range() -> MotionRange {
    MotionRange {
        max_rotation_deg: 15.0,
        max_log_scale: 0.1,
        max_shear: 0.0,
        max_shift: 5.0,
    }
}

fn nonrigid_wavelength() -> f64 {
    40.0
}

impl Deformation {
    pub fn identity() -> Self {
        Deformation::GlobalAffine {
            range: MotionRange::default(),
            fixed: Some(Affine::IDENTITY),
        }
    }

    pub fn global_affine() -> Self {
        Deformation::GlobalAffine {
            range: MotionRange::default(),
            fixed: None,
        }
    }

    pub fn per_part_affine(parts: usize) -> Self {
        Deformation::PerPartAffine {
            parts,
            range: part_range(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Deformation::GlobalAffine { .. } => "global-affine",
            Deformation::PerPartAffine { .. } => "per-part-affine",
            Deformation::SmoothNonrigid { .. } => "smooth-nonrigid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    /// Sum of oriented sinusoidal gratings.
    Bands,
    /// Softened checkerboard.
    Checker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub size: usize,
    pub guidance_channels: usize,
    pub texture: TextureKind,
    /// Shortest texture wavelength in pixels.
    pub min_wavelength: f64,
    pub deformation: Deformation,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 64,
            guidance_channels: 3,
            texture: TextureKind::Bands,
            min_wavelength: 10.0,
            deformation: Deformation::global_affine(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("scene size {} below 8", self.size)));
        }
        if self.guidance_channels == 0 {
            return Err(Error::Config("guidance_channels must be positive".into()));
        }
        if !(self.min_wavelength >= 2.0) {
            return Err(Error::Config("min_wavelength must be >= 2".into()));
        }
        match &self.deformation {
            Deformation::PerPartAffine { parts, .. } if *parts == 0 => {
                Err(Error::Config("per-part-affine scene needs at least one part".into()))
            }
            Deformation::SmoothNonrigid {
                amplitude,
                min_wavelength,
            } if !(*amplitude >= 0.0 && *min_wavelength > 0.0) => {
                Err(Error::Config("nonrigid amplitude and wavelength must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub spec: SceneSpec,
    /// Backward map of every moving surface as `[[a00, a01, t0], [a10, a11, t1]]`.
    pub affine_params: Vec<[[f64; 3]; 2]>,
}

/// One generated pair. Tensors carry a batch axis of 1; images are in
/// `[−1, 1]`, guidance in `[0, 1]`, visibility in `{0, 1}`.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub flow: FlowField<f32>,
    pub visibility: Tensor<f32>,
    pub guidance_s: Tensor<f32>,
    pub guidance_t: Tensor<f32>,
    pub meta: SceneMeta,
}

#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    waves: Vec<([f64; 2], f64, [f64; 3])>,
    checker: Option<([f64; 2], f64, [f64; 3])>,
}

impl Texture {
    fn draw(kind: TextureKind, min_wavelength: f64, rng: &mut ChaCha8Rng) -> Self {
        let base = [0; 3].map(|_| rng.random_range(-0.45..0.45));
        let mut wave = |amp: f64| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let lambda = rng.random_range(min_wavelength..2.2 * min_wavelength);
            let k = 2.0 * std::f64::consts::PI / lambda;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let color = [0; 3].map(|_| rng.random_range(-amp..amp));
            ([k * theta.cos(), k * theta.sin()], phase, color)
        };
        match kind {
            TextureKind::Bands => Texture {
                base,
                waves: (0..3).map(|_| wave(0.17)).collect(),
                checker: None,
            },
            TextureKind::Checker => Texture {
                base,
                waves: vec![wave(0.1)],
                checker: Some(wave(0.35)),
            },
        }
    }

    fn eval(&self, u: [f64; 2]) -> [f64; 3] {
        let mut c = self.base;
        for (k, phase, color) in &self.waves {
            let s = (k[0] * u[0] + k[1] * u[1] + phase).sin();
            (0..3).for_each(|i| c[i] += color[i] * s);
        }
        if let Some((k, phase, color)) = &self.checker {
            let a = (k[0] * u[0] + k[1] * u[1] + phase).sin();
            let b = (-k[1] * u[0] + k[0] * u[1] + phase).sin();
            let s = (1.5 * a * b).tanh() / 1.5f64.tanh();
            (0..3).for_each(|i| c[i] += color[i] * s);
        }
        c.map(|v| v.clamp(-1.0, 1.0))
    }
}

/// Convex polygon, counter-clockwise in image coordinates (y down).
#[derive(Clone, Debug)]
struct Polygon(Vec<[f64; 2]>);

impl Polygon {
    fn draw(center: [f64; 2], radius: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(5..=7);
        let offset: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let aspect: f64 = rng.random_range(0.65..1.0);
        let pts = (0..n)
            .map(|i| {
                let a = offset + std::f64::consts::TAU * i as f64 / n as f64;
                [center[0] + radius * a.cos(), center[1] + radius * aspect * a.sin()]
            })
            .collect();
        Polygon(pts)
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.0.len();
        (0..n).all(|i| {
            let (a, b) = (self.0[i], self.0[(i + 1) % n]);
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
    }
}

/// Line segment in source coordinates, assigned to one guidance channel.
type Segment = ([f64; 2], [f64; 2], usize);

struct Surface {
    texture: Texture,
    /// `None` for the full-frame background.
    shape: Option<Polygon>,
    /// Backward map target → source.
    backward: Box<dyn Fn([f64; 2]) -> [f64; 2]>,
    /// Forward map source → target.
    forward: Box<dyn Fn([f64; 2]) -> [f64; 2]>,
}

impl Surface {
    fn covers(&self, u: [f64; 2]) -> bool {
        self.shape.as_ref().is_none_or(|p| p.contains(u))
    }
}

struct Scene {
    /// Back to front.
    surfaces: Vec<Surface>,
    segments: Vec<Segment>,
    /// Surface carrying each segment.
    owners: Vec<usize>,
    affines: Vec<Affine>,
}

/// Two crossing bars of unequal length through `c`, rotated at random; the
/// long bar has half-length `reach`.
fn skeleton(c: [f64; 2], reach: f64, channel: usize, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (cos, sin) = (theta.cos(), theta.sin());
    let long = [reach * cos, reach * sin];
    let short = [-0.5 * reach * sin, 0.5 * reach * cos];
    vec![
        ([c[0] - long[0], c[1] - long[1]], [c[0] + long[0], c[1] + long[1]], channel),
        (c, [c[0] + short[0], c[1] + short[1]], channel),
    ]
}

/// Skeleton of a full-frame surface: per channel, parallel lines spanning
/// the frame with spacing `LATTICE_SPACING`, orientations `π/g` apart.
fn lattice(size: f64, g: usize, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let theta0: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let c = (size - 1.0) / 2.0;
    let reach = size;
    let mut out = Vec::new();
    for ch in 0..g {
        let theta = theta0 + std::f64::consts::PI * ch as f64 / g as f64;
        let dir = [theta.cos(), theta.sin()];
        let normal = [-dir[1], dir[0]];
        let phase = rng.random_range(0.0..LATTICE_SPACING);
        let mut off = -reach + phase;
        while off < reach {
            let m = [c + off * normal[0], c + off * normal[1]];
            out.push((
                [m[0] - reach * dir[0], m[1] - reach * dir[1]],
                [m[0] + reach * dir[0], m[1] + reach * dir[1]],
                ch,
            ));
            off += LATTICE_SPACING;
        }
    }
    out
}

/// Line spacing of full-frame skeletons.
pub const LATTICE_SPACING: f64 = 16.0;

fn build_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.size as f64;
    let center = [(s - 1.0) / 2.0, (s - 1.0) / 2.0];
    let g = spec.guidance_channels;
    let tex = |rng: &mut ChaCha8Rng| Texture::draw(spec.texture, spec.min_wavelength, rng);
    match &spec.deformation {
        Deformation::GlobalAffine { range, fixed } => {
            let texture = tex(&mut rng);
            let b = match fixed {
                Some(a) => *a,
                None => range.draw(center, &mut rng),
            };
            let f = b.inverse()?;
            let segments = lattice(s, g, &mut rng);
            let owners = vec![0; segments.len()];
            Ok(Scene {
                surfaces: vec![Surface {
                    texture,
                    shape: None,
                    backward: Box::new(move |x| b.apply(x)),
                    forward: Box::new(move |u| f.apply(u)),
                }],
                segments,
                owners,
                affines: vec![b],
            })
        }
        Deformation::PerPartAffine { parts, range } => {
            let mut surfaces = vec![Surface {
                texture: tex(&mut rng),
                shape: None,
                backward: Box::new(|x| x),
                forward: Box::new(|u| u),
            }];
            let (mut segments, mut owners) = (Vec::new(), Vec::new());
            let mut affines = Vec::new();
            for i in 0..*parts {
                let c = [0; 2].map(|_| rng.random_range(0.3 * s..0.7 * s));
                let radius = rng.random_range(0.15 * s..0.28 * s);
                let poly = Polygon::draw(c, radius, &mut rng);
                let b = range.draw(c, &mut rng);
                let f = b.inverse()?;
                let sk = skeleton(c, 0.7 * radius, i % g, &mut rng);
                owners.extend(std::iter::repeat_n(i + 1, sk.len()));
                segments.extend(sk);
                surfaces.push(Surface {
                    texture: tex(&mut rng),
                    shape: Some(poly),
                    backward: Box::new(move |x| b.apply(x)),
                    forward: Box::new(move |u| f.apply(u)),
                });
                affines.push(b);
            }
            Ok(Scene {
                surfaces,
                segments,
                owners,
                affines,
            })
        }
        Deformation::SmoothNonrigid {
            amplitude,
            min_wavelength,
        } => {
            let texture = tex(&mut rng);
            let modes: Vec<([f64; 2], f64, [f64; 2])> = (0..3)
                .map(|_| {
                    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let lambda = rng.random_range(*min_wavelength..2.0 * min_wavelength);
                    let k = std::f64::consts::TAU / lambda;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    let amp = [0; 2].map(|_| rng.random_range(-amplitude / 3.0..=amplitude / 3.0));
                    ([k * theta.cos(), k * theta.sin()], phase, amp)
                })
                .collect();
            let disp = move |x: [f64; 2]| {
                let mut d = [0.0; 2];
                for (k, phase, amp) in &modes {
                    let s = (k[0] * x[0] + k[1] * x[1] + phase).sin();
                    d[0] += amp[0] * s;
                    d[1] += amp[1] * s;
                }
                d
            };
            let disp2 = disp.clone();
            let segments = lattice(s, g, &mut rng);
            let owners = vec![0; segments.len()];
            Ok(Scene {
                surfaces: vec![Surface {
                    texture,
                    shape: None,
                    backward: Box::new(move |x| {
                        let d = disp(x);
                        [x[0] + d[0], x[1] + d[1]]
                    }),
                    // fixed-point inverse of x ↦ x + d(x); d is a contraction
                    forward: Box::new(move |u| {
                        let mut x = u;
                        for _ in 0..50 {
                            let d = disp2(x);
                            x = [u[0] - d[0], u[1] - d[1]];
                        }
                        x
                    }),
                }],
                segments,
                owners,
                affines: Vec::new(),
            })
        }
    }
}

impl Scene {
    /// Front-most surface covering source position `u`.
    fn source_surface(&self, u: [f64; 2]) -> usize {
        (0..self.surfaces.len()).rev().find(|&i| self.surfaces[i].covers(u)).unwrap_or(0)
    }

    /// Front-most surface seen at target pixel `x` and its source position.
    fn target_surface(&self, x: [f64; 2]) -> (usize, [f64; 2]) {
        for i in (0..self.surfaces.len()).rev() {
            let u = (self.surfaces[i].backward)(x);
            if self.surfaces[i].covers(u) {
                return (i, u);
            }
        }
        (0, (self.surfaces[0].backward)(x))
    }
}

/// Every bilinear tap with nonzero weight around `u` lies in frame and
/// shows surface `id` in the source.
fn taps_visible(scene: &Scene, id: usize, u: [f64; 2], size: usize) -> bool {
    let (x0, y0) = (u[0].floor(), u[1].floor());
    let (ax, ay) = (u[0] - x0, u[1] - y0);
    let taps = [
        (x0, y0, (1.0 - ax) * (1.0 - ay)),
        (x0 + 1.0, y0, ax * (1.0 - ay)),
        (x0, y0 + 1.0, (1.0 - ax) * ay),
        (x0 + 1.0, y0 + 1.0, ax * ay),
    ];
    let max = (size - 1) as f64;
    taps.iter().filter(|t| t.2 > 0.0).all(|&(tx, ty, _)| {
        (0.0..=max).contains(&tx) && (0.0..=max).contains(&ty) && scene.source_surface([tx, ty]) == id
    })
}

/// Width of the Gaussian line profile of guidance segments.
pub const GUIDANCE_SIGMA: f64 = 1.5;

/// Anti-aliased segments, one channel per guidance index: `[1, g, s, s]`.
fn rasterize(segments: &[Segment], g: usize, size: usize, map: &dyn Fn([f64; 2]) -> [f64; 2]) -> Tensor<f32> {
    let mut out = vec![0f32; g * size * size];
    for &(p, q, ch) in segments {
        let (p, q) = (map(p), map(q));
        let d = [q[0] - p[0], q[1] - p[1]];
        let len2 = (d[0] * d[0] + d[1] * d[1]).max(1e-12);
        for y in 0..size {
            for x in 0..size {
                let v = [x as f64 - p[0], y as f64 - p[1]];
                let t = ((v[0] * d[0] + v[1] * d[1]) / len2).clamp(0.0, 1.0);
                let e = [v[0] - t * d[0], v[1] - t * d[1]];
                let dist = (e[0] * e[0] + e[1] * e[1]).sqrt();
                let val = (-dist * dist / (2.0 * GUIDANCE_SIGMA * GUIDANCE_SIGMA)).exp() as f32;
                let o = &mut out[(ch * size + y) * size + x];
                *o = o.max(val);
            }
        }
    }
    Tensor::new(&[1, g, size, size], out).unwrap()
}

/// Generate one sample; bit-deterministic in `(seed, spec)`.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let scene = build_scene(seed, spec)?;
    let n = spec.size;
    let plane = n * n;
    let mut source = vec![0f32; 3 * plane];
    let mut target = vec![0f32; 3 * plane];
    let mut flow = vec![0f32; 2 * plane];
    let mut vis = vec![0f32; plane];
    for y in 0..n {
        for x in 0..n {
            let p = [x as f64, y as f64];
            let l = y * n + x;
            let sid = scene.source_surface(p);
            let cs = scene.surfaces[sid].texture.eval(p);
            let (tid, u) = scene.target_surface(p);
            let ct = scene.surfaces[tid].texture.eval(u);
            for c in 0..3 {
                source[c * plane + l] = cs[c] as f32;
                target[c * plane + l] = ct[c] as f32;
            }
            flow[l] = (u[0] - p[0]) as f32;
            flow[plane + l] = (u[1] - p[1]) as f32;
            // visibility is judged on the stored (f32) flow
            let stored = [p[0] + flow[l] as f64, p[1] + flow[plane + l] as f64];
            vis[l] = if taps_visible(&scene, tid, stored, n) { 1.0 } else { 0.0 };
        }
    }
    let g = spec.guidance_channels;
    let guidance_s = rasterize(&scene.segments, g, n, &|u| u);
    let mut guidance_t = Tensor::<f32>::zeros(&[1, g, n, n]);
    for (k, surf) in scene.surfaces.iter().enumerate() {
        let own: Vec<Segment> = scene.segments.iter().zip(&scene.owners).filter(|(_, &o)| o == k).map(|(&seg, _)| seg).collect();
        if !own.is_empty() {
            guidance_t = guidance_t.zip_map(&rasterize(&own, g, n, &|u| (surf.forward)(u)), f32::max)?;
        }
    }
    Ok(SyntheticSample {
        source: Tensor::new(&[1, 3, n, n], source)?,
        target: Tensor::new(&[1, 3, n, n], target)?,
        flow: FlowField::new(Tensor::new(&[1, 2, n, n], flow)?)?,
        visibility: Tensor::new(&[1, 1, n, n], vis)?,
        guidance_s,
        guidance_t,
        meta: SceneMeta {
            seed,
            spec: spec.clone(),
            affine_params: scene.affines.iter().map(Affine::matrix).collect(),
        },
    })
}

/// Seed of sample `index` in a dataset with base seed `base`.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(index)
}

/// Samples stacked along the batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub flow: FlowField<f32>,
    pub visibility: Tensor<f32>,
    pub guidance_s: Tensor<f32>,
    pub guidance_t: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[SyntheticSample]) -> Result<Self> {
        let cat = |f: &dyn Fn(&SyntheticSample) -> Tensor<f32>| {
            Tensor::cat_batch(&samples.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Batch {
            source: cat(&|s| s.source.clone())?,
            target: cat(&|s| s.target.clone())?,
            flow: FlowField::new(cat(&|s| s.flow.tensor().clone())?)?,
            visibility: cat(&|s| s.visibility.clone())?,
            guidance_s: cat(&|s| s.guidance_s.clone())?,
            guidance_t: cat(&|s| s.guidance_t.clone())?,
        })
    }

    /// Generate samples `start .. start + len` of the dataset `(base, spec)`.
    pub fn generate(base: u64, start: u64, len: usize, spec: &SceneSpec) -> Result<Self> {
        let samples = (0..len as u64)
            .map(|i| gen_scene(sample_seed(base, start + i), spec))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples)
    }

    pub fn len(&self) -> usize {
        self.source.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flow-estimator input: source image, source guidance, target guidance.
    pub fn flow_input(&self) -> Result<Tensor<f32>> {
        concat_channels(&[&self.source, &self.guidance_s, &self.guidance_t])
    }
}

/// Channel-wise concatenation of rank-4 tensors with equal batch and size.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Empty("concat_channels".into()))?;
    let [n, _, h, w] = first.dims4("concat_channels")?;
    let mut cs = Vec::with_capacity(parts.len());
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::dim("concat_channels", "batch/spatial", format!("{n}x{h}x{w}"), format!("{pn}x{ph}x{pw}")));
        }
        cs.push(pc);
    }
    let total: usize = cs.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&cs) {
            out.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new(&[n, total, h, w], out)
}

/// Mean endpoint error over pixels where `visibility > 0.5`.
///
/// A prediction at lower resolution is resized to the ground truth with its
/// offsets rescaled.
pub fn epe<T: Real>(pred: &FlowField<T>, gt: &FlowField<T>, visibility: &Tensor<T>) -> Result<f64> {
    let [n, _, h, w] = gt.dims();
    let resized;
    let pred = if pred.dims() != gt.dims() {
        let [pn, ..] = pred.dims();
        if pn != n {
            return Err(Error::dim("epe", "batch", n, pn));
        }
        resized = pred.resize(h, w)?;
        &resized
    } else {
        pred
    };
    visibility.expect_shape("epe", &[n, 1, h, w])?;
    let (p, g) = (pred.tensor(), gt.tensor());
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                if visibility.data()[visibility.idx4(b, 0, y, x)].as_f64() <= 0.5 {
                    continue;
                }
                let dx = p.data()[p.idx4(b, 0, y, x)].as_f64() - g.data()[g.idx4(b, 0, y, x)].as_f64();
                let dy = p.data()[p.idx4(b, 1, y, x)].as_f64() - g.data()[g.idx4(b, 1, y, x)].as_f64();
                sum += (dx * dx + dy * dy).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("epe: no visible pixels".into()));
    }
    Ok(sum / count as f64)
}

/// Peak value of images in `[−1, 1]`.
pub const PSNR_PEAK: f64 = 2.0;

/// `10·log10(peak² / MSE)` over pixels where `mask > 0.5` (all pixels when
/// `mask` is `None`); `+∞` when the MSE is zero.
///
/// `mask` is `[n, 1, h, w]` and applies to every channel.
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<f64> {
    y.expect_shape("psnr", x.shape())?;
    let [n, c, h, w] = x.dims4("psnr")?;
    if let Some(m) = mask {
        m.expect_shape("psnr", &[n, 1, h, w])?;
    }
    let mut se = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        for l in 0..h * w {
            if let Some(m) = mask {
                if m.data()[b * h * w + l].as_f64() <= 0.5 {
                    continue;
                }
            }
            for ch in 0..c {
                let i = (b * c + ch) * h * w + l;
                let d = x.data()[i].as_f64() - y.data()[i].as_f64();
                se += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("psnr: empty mask".into()));
    }
    let mse = se / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10())
}
