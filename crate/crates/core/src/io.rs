//! File formats: flow fields, PNG images, flow visualization and the
//! synthetic dataset directory.
//!
//! Flow file (little-endian):
//!
//! ```text
//! "GFLO"  u32 version  u32 H  u32 W  H·W × (f32 Δx, f32 Δy), row-major
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synth::{SceneMeta, SyntheticSample};
use crate::tensor::{Real, Tensor};
use crate::warp::FlowField;

pub const FLOW_MAGIC: &[u8; 4] = b"GFLO";
pub const FLOW_VERSION: u32 = 1;

pub fn flow_to_bytes<T: Real>(flow: &FlowField<T>) -> Result<Vec<u8>> {
    let [n, _, h, w] = flow.dims();
    if n != 1 {
        return Err(Error::dim("write_flow", "batch", 1, n));
    }
    let mut out = Vec::with_capacity(16 + 8 * h * w);
    out.extend_from_slice(FLOW_MAGIC);
    for v in [FLOW_VERSION, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(0, x, y);
            out.extend_from_slice(&(dx.as_f64() as f32).to_le_bytes());
            out.extend_from_slice(&(dy.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn flow_from_bytes(bytes: &[u8], origin: &Path) -> Result<FlowField<f32>> {
    let bad = |d: String| Error::format(origin, d);
    if bytes.len() < 16 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != FLOW_MAGIC {
        return Err(bad(format!("bad magic {:?}, expected \"GFLO\"", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, h, w) = (word(0), word(1) as usize, word(2) as usize);
    if version != FLOW_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let expected = 16 + 8 * h * w;
    if bytes.len() != expected {
        return Err(bad(format!("{h}x{w} flow needs {expected} bytes, file has {}", bytes.len())));
    }
    let plane = h * w;
    let mut data = vec![0f32; 2 * plane];
    for (l, chunk) in bytes[16..].chunks_exact(8).enumerate() {
        data[l] = f32::from_le_bytes(chunk[..4].try_into().unwrap());
        data[plane + l] = f32::from_le_bytes(chunk[4..].try_into().unwrap());
    }
    FlowField::new(Tensor::new(&[1, 2, h, w], data)?)
}

pub fn write_flow<T: Real>(path: &Path, flow: &FlowField<T>) -> Result<()> {
    fs::write(path, flow_to_bytes(flow)?).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<FlowField<f32>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    flow_from_bytes(&bytes, path)
}

/// `[−1, 1]` → `0..=255`, linear with round-half-up.
pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5 + 0.5).floor() as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 127.5 - 1.0
}

fn write_png_raw(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    writer.finish().map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

/// Write `[1, 3, h, w]` (or `[3, h, w]`) in `[−1, 1]` as an RGB PNG.
pub fn write_image<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (h, w) = rgb_dims(image)?;
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for l in 0..plane {
        for c in 0..3 {
            buf.push(quantize(image.data()[c * plane + l].as_f64()));
        }
    }
    write_png_raw(path, w, h, png::ColorType::Rgb, &buf)
}

fn rgb_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match image.shape() {
        [1, 3, h, w] | [3, h, w] => Ok((*h, *w)),
        s => Err(Error::dim("write_image", "shape", "[1, 3, h, w]", format!("{s:?}"))),
    }
}

/// Write 8-bit RGB pixels (row-major, interleaved).
pub fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::dim("write_rgb8", "byte count", 3 * width * height, rgb.len()));
    }
    write_png_raw(path, width, height, png::ColorType::Rgb, rgb)
}

/// Write `[1, c, h, w]` values in `[0, 1]` as a grayscale PNG with the `c`
/// channels tiled left to right (width `c·w`).
pub fn write_channels<T: Real>(path: &Path, maps: &Tensor<T>) -> Result<()> {
    let [n, c, h, w] = maps.dims4("write_channels")?;
    if n != 1 {
        return Err(Error::dim("write_channels", "batch", 1, n));
    }
    let mut buf = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = maps.data()[(ch * h + y) * w + x].as_f64().clamp(0.0, 1.0);
                buf[y * c * w + ch * w + x] = (v * 255.0 + 0.5).floor() as u8;
            }
        }
    }
    write_png_raw(path, c * w, h, png::ColorType::Grayscale, &buf)
}

/// Inverse of [`write_channels`].
pub fn read_channels(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let (w, h, color, data) = read_png_raw(path)?;
    if color != png::ColorType::Grayscale || channels == 0 || w % channels != 0 {
        return Err(Error::format(path, format!("expected a grayscale strip of {channels} tiles")));
    }
    let tw = w / channels;
    let mut out = vec![0f32; channels * h * tw];
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..tw {
                out[(ch * h + y) * tw + x] = data[y * w + ch * tw + x] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[1, channels, h, tw], out)
}

fn read_png_raw(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit PNGs are supported"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

/// Read an RGB(A) or grayscale PNG as `[1, 3, h, w]` in `[−1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, color, data) = read_png_raw(path)?;
    let stride = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let plane = h * w;
    let mut out = vec![0f32; 3 * plane];
    for l in 0..plane {
        for c in 0..3 {
            let q = if stride >= 3 { data[l * stride + c] } else { data[l * stride] };
            out[c * plane + l] = dequantize(q);
        }
    }
    Tensor::new(&[1, 3, h, w], out)
}

/// Standard optical-flow color wheel (RY, YG, GC, CB, BM, MR segments).
fn color_wheel() -> Vec<[f64; 3]> {
    let segs = [(15, [255.0, 0.0, 0.0], [0.0, 1.0, 0.0]), (6, [255.0, 255.0, 0.0], [-1.0, 0.0, 0.0]),
        (4, [0.0, 255.0, 0.0], [0.0, 0.0, 1.0]), (11, [0.0, 255.0, 255.0], [0.0, -1.0, 0.0]),
        (13, [0.0, 0.0, 255.0], [1.0, 0.0, 0.0]), (6, [255.0, 0.0, 255.0], [0.0, 0.0, -1.0])];
    let mut wheel = Vec::with_capacity(55);
    for (n, start, dir) in segs {
        for i in 0..n {
            let t = 255.0 * i as f64 / n as f64;
            wheel.push([0, 1, 2].map(|c| (start[c] + dir[c] * t) / 255.0));
        }
    }
    wheel
}

/// RGB of one flow vector; magnitude `max_magnitude` is fully saturated,
/// zero is white.
pub fn flow_color(dx: f64, dy: f64, max_magnitude: f64, wheel: &[[f64; 3]]) -> [u8; 3] {
    let rad = ((dx * dx + dy * dy).sqrt() / max_magnitude.max(f64::MIN_POSITIVE)).min(1.0);
    let ncols = wheel.len();
    let angle = (-dy).atan2(-dx) / std::f64::consts::PI;
    let fk = (angle + 1.0) / 2.0 * (ncols - 1) as f64;
    let k0 = (fk.floor() as usize).min(ncols - 1);
    let k1 = (k0 + 1) % ncols;
    let f = fk - k0 as f64;
    [0, 1, 2].map(|c| {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        let col = 1.0 - rad * (1.0 - col);
        (255.0 * col + 0.5).floor().clamp(0.0, 255.0) as u8
    })
}

/// Color-wheel rendering of batch item 0 as interleaved RGB (`w × h`).
///
/// `max_magnitude` of `None` normalizes by the largest vector. With
/// `legend`, an `h × h` wheel panel spanning the same magnitude range is
/// appended on the right.
pub fn flow_to_rgb<T: Real>(flow: &FlowField<T>, max_magnitude: Option<f64>, legend: bool) -> (usize, usize, Vec<u8>) {
    let [_, _, h, w] = flow.dims();
    let wheel = color_wheel();
    let max = max_magnitude.unwrap_or_else(|| {
        let mut m: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = flow.at(0, x, y);
                m = m.max(dx.as_f64().hypot(dy.as_f64()));
            }
        }
        if m > 0.0 {
            m
        } else {
            1.0
        }
    });
    let width = if legend { w + h } else { w };
    let mut rgb = vec![255u8; 3 * width * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(0, x, y);
            let c = flow_color(dx.as_f64(), dy.as_f64(), max, &wheel);
            rgb[3 * (y * width + x)..][..3].copy_from_slice(&c);
        }
        if legend {
            let r = (h as f64 - 1.0) / 2.0;
            for x in 0..h {
                let (px, py) = (x as f64 - r, y as f64 - r);
                if px.hypot(py) <= r {
                    let c = flow_color(px / r * max, py / r * max, max, &wheel);
                    rgb[3 * (y * width + w + x)..][..3].copy_from_slice(&c);
                }
            }
        }
    }
    (width, h, rgb)
}

pub fn write_flow_png<T: Real>(path: &Path, flow: &FlowField<T>, max_magnitude: Option<f64>, legend: bool) -> Result<()> {
    let (w, h, rgb) = flow_to_rgb(flow, max_magnitude, legend);
    write_rgb8(path, w, h, &rgb)
}

/// Hue in degrees of an 8-bit RGB color (`None` for grays).
pub fn hue_degrees(c: [u8; 3]) -> Option<f64> {
    let [r, g, b] = c.map(|v| v as f64 / 255.0);
    let (max, min) = (r.max(g).max(b), r.min(g).min(b));
    let d = max - min;
    if d < 1e-9 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(60.0 * h)
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:06}"))
}

/// Write one sample in the dataset layout.
pub fn write_sample(root: &Path, index: usize, sample: &SyntheticSample) -> Result<PathBuf> {
    let dir = sample_dir(root, index);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_image(&dir.join("source.png"), &sample.source)?;
    write_image(&dir.join("target.png"), &sample.target)?;
    write_flow(&dir.join("flow.gflo"), &sample.flow)?;
    write_channels(&dir.join("visibility.png"), &sample.visibility)?;
    write_channels(&dir.join("guidance_s.png"), &sample.guidance_s)?;
    write_channels(&dir.join("guidance_t.png"), &sample.guidance_t)?;
    let meta = serde_json::to_string_pretty(&sample.meta)?;
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(dir)
}

/// A sample read back from disk; images carry PNG quantization.
#[derive(Clone, Debug)]
pub struct StoredSample {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub flow: FlowField<f32>,
    pub visibility: Tensor<f32>,
    pub guidance_s: Tensor<f32>,
    pub guidance_t: Tensor<f32>,
    pub meta: SceneMeta,
}

pub fn read_sample(dir: &Path) -> Result<StoredSample> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SceneMeta = serde_json::from_str(&text)?;
    let g = meta.spec.guidance_channels;
    Ok(StoredSample {
        source: read_image(&dir.join("source.png"))?,
        target: read_image(&dir.join("target.png"))?,
        flow: read_flow(&dir.join("flow.gflo"))?,
        visibility: read_channels(&dir.join("visibility.png"), 1)?,
        guidance_s: read_channels(&dir.join("guidance_s.png"), g)?,
        guidance_t: read_channels(&dir.join("guidance_t.png"), g)?,
        meta,
    })
}

/// Sample directories under `root`, sorted by name.
pub fn list_samples(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sample_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Write `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
