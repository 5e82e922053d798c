//! Synthetic hazy/clean pair generation from the atmospheric scattering
//! model `I = t·R + A·(1 - t)` with transmission `t = exp(-beta·d)`, plus
//! binary PPM I/O and dataset assembly. Clean images are procedural
//! (gradients, rectangles, noise) so the repository is self-contained.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// RGB image, interleaved row-major, every value in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::InvalidArgument(format!(
                "image buffer holds {} values, {}x{} rgb needs {}",
                pixels.len(),
                height,
                width,
                3 * height * width
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0,1]"
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(height, width, vec![value; 3 * height * width])
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    /// Planar `(1, 3, H, W)` copy for the network.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut data = vec![T::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[c * h * w + y * w + x] = T::from_f64(self.pixels[self.idx(y, x, c)]);
                }
            }
        }
        Tensor::from_vec([1, 3, h, w], data).expect("sized above")
    }

    /// Top-left crop, for undoing padding.
    pub fn crop(&self, height: usize, width: usize) -> Result<Image> {
        if height > self.height || width > self.width {
            return Err(Error::InvalidArgument(format!(
                "cannot crop {}x{} out of {}x{}",
                height, width, self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(3 * height * width);
        for y in 0..height {
            let row = &self.pixels[y * self.width * 3..(y * self.width + width) * 3];
            pixels.extend_from_slice(row);
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    /// Mirrors the last interior row/column to make both dims even (single
    /// extra row or column at most). A no-op for even inputs.
    pub fn reflect_pad_to_even(&self) -> Image {
        let nh = self.height + self.height % 2;
        let nw = self.width + self.width % 2;
        if nh == self.height && nw == self.width {
            return self.clone();
        }
        let src_y = |y: usize| {
            if y < self.height {
                y
            } else if self.height >= 2 {
                self.height - 2
            } else {
                0
            }
        };
        let src_x = |x: usize| {
            if x < self.width {
                x
            } else if self.width >= 2 {
                self.width - 2
            } else {
                0
            }
        };
        let mut pixels = vec![0.0; 3 * nh * nw];
        for y in 0..nh {
            for x in 0..nw {
                let s = (src_y(y) * self.width + src_x(x)) * 3;
                let d = (y * nw + x) * 3;
                pixels[d..d + 3].copy_from_slice(&self.pixels[s..s + 3]);
            }
        }
        Image {
            height: nh,
            width: nw,
            pixels,
        }
    }

    /// Back from a planar `(1, 3, H, W)` tensor, clamping into [0,1].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.shape;
        if n != 1 || c != 3 {
            return Err(Error::ShapeMismatch {
                op: "image_from_tensor",
                expected: "(1,3,H,W)".into(),
                got: crate::tensor::shape_string(&t.shape),
            });
        }
        let mut pixels = vec![0.0; 3 * h * w];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = t.data[ch * h * w + y * w + x].to_f64s();
                    pixels[(y * w + x) * 3 + ch] = v.clamp(0.0, 1.0);
                }
            }
        }
        Ok(Image {
            height: h,
            width: w,
            pixels,
        })
    }
}

/// Scene depth in arbitrary units, non-negative.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
}

/// Scattering strength and global airlight.
#[derive(Debug, Clone, Copy)]
pub struct HazeParams {
    pub beta: f64,
    pub airlight: f64,
}

impl HazeParams {
    pub fn new(beta: f64, airlight: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scattering coefficient must be >= 0, got {beta}"
            )));
        }
        if !(0.0..=1.0).contains(&airlight) {
            return Err(Error::InvalidArgument(format!(
                "airlight must be in [0,1], got {airlight}"
            )));
        }
        Ok(HazeParams { beta, airlight })
    }
}

/// `I = t·R + A·(1-t)` per pixel per channel, `t = exp(-beta·d)`. Output is
/// clamped to [0,1]; the clamp is a no-op for valid inputs since I is a
/// convex combination of R and A.
pub fn synthesize_haze(clean: &Image, depth: &DepthMap, p: &HazeParams) -> Result<Image> {
    if depth.height != clean.height || depth.width != clean.width {
        return Err(Error::ShapeMismatch {
            op: "synthesize_haze",
            expected: format!("{}x{}", clean.height, clean.width),
            got: format!("{}x{}", depth.height, depth.width),
        });
    }
    let mut pixels = vec![0.0; clean.pixels.len()];
    for i in 0..depth.depth.len() {
        let t = (-p.beta * depth.depth[i]).exp();
        for c in 0..3 {
            let r = clean.pixels[i * 3 + c];
            pixels[i * 3 + c] = (t * r + p.airlight * (1.0 - t)).clamp(0.0, 1.0);
        }
    }
    Ok(Image {
        height: clean.height,
        width: clean.width,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthKind {
    Ramp,
    Constant,
    Radial,
}

impl DepthKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DepthKind::Ramp => "ramp",
            DepthKind::Constant => "constant",
            DepthKind::Radial => "radial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(DepthKind::Ramp),
            "constant" => Ok(DepthKind::Constant),
            "radial" => Ok(DepthKind::Radial),
            other => Err(Error::InvalidArgument(format!(
                "unknown depth kind {other:?}"
            ))),
        }
    }
}

impl fmt::Display for DepthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Structured toy depth fields: constant everywhere, a left-to-right ramp
/// from 0 to `scale`, or distance from the image center scaled so the far
/// corner sits at `scale`.
pub fn make_depth(kind: DepthKind, height: usize, width: usize, scale: f64) -> DepthMap {
    let mut depth = vec![0.0; height * width];
    match kind {
        DepthKind::Constant => {
            depth.fill(scale);
        }
        DepthKind::Ramp => {
            for y in 0..height {
                for x in 0..width {
                    let t = if width > 1 {
                        x as f64 / (width - 1) as f64
                    } else {
                        0.0
                    };
                    depth[y * width + x] = scale * t;
                }
            }
        }
        DepthKind::Radial => {
            let cy = (height as f64 - 1.0) / 2.0;
            let cx = (width as f64 - 1.0) / 2.0;
            let rmax = (cy * cy + cx * cx).sqrt();
            for y in 0..height {
                for x in 0..width {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let r = (dy * dy + dx * dx).sqrt();
                    depth[y * width + x] = if rmax > 0.0 { scale * r / rmax } else { 0.0 };
                }
            }
        }
    }
    DepthMap {
        height,
        width,
        depth,
    }
}

/// Writes binary PPM (P6, maxval 255). Quantization rounds half away from
/// zero, so `save(load(f))` is byte-identical to `f`.
pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + img.pixels.len());
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    for &v in &img.pixels {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

struct PpmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PpmTokens<'a> {
    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::PpmFormat("truncated header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::PpmFormat(format!("bad {what} field")))
    }
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let mut toks = PpmTokens {
        bytes: &bytes,
        pos: 0,
    };
    if toks.token()? != b"P6" {
        return Err(Error::PpmFormat("not a binary ppm (magic != P6)".into()));
    }
    let width = toks.number("width")?;
    let height = toks.number("height")?;
    let maxval = toks.number("maxval")?;
    if maxval != 255 {
        return Err(Error::PpmFormat(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    let payload = toks.pos + 1;
    let need = 3 * width * height;
    if bytes.len() < payload + need {
        return Err(Error::PpmFormat(format!(
            "payload truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(payload)
        )));
    }
    let pixels = bytes[payload..payload + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::new(height, width, pixels)
}

/// One synthetic training example with its generation parameters.
#[derive(Debug, Clone)]
pub struct Pair {
    pub hazy: Image,
    pub clean: Image,
    pub beta: f64,
    pub airlight: f64,
    pub depth_kind: DepthKind,
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn procedural_clean<R: Rng>(rng: &mut R, h: usize, w: usize) -> Image {
    let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let direction = rng.gen_range(0..3u8);
    let mut pixels = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = match direction {
                0 => {
                    if w > 1 {
                        x as f64 / (w - 1) as f64
                    } else {
                        0.0
                    }
                }
                1 => {
                    if h > 1 {
                        y as f64 / (h - 1) as f64
                    } else {
                        0.0
                    }
                }
                _ => {
                    if h + w > 2 {
                        (x + y) as f64 / (h + w - 2) as f64
                    } else {
                        0.0
                    }
                }
            };
            let px = lerp3(c0, c1, t);
            for c in 0..3 {
                pixels[(y * w + x) * 3 + c] = px[c];
            }
        }
    }
    let rects = rng.gen_range(2..=4usize);
    for _ in 0..rects {
        let y0 = rng.gen_range(0..h);
        let x0 = rng.gen_range(0..w);
        let rh = rng.gen_range(1..=h - y0);
        let rw = rng.gen_range(1..=w - x0);
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let alpha: f64 = rng.gen_range(0.5..1.0);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    pixels[i] += alpha * (color[c] - pixels[i]);
                }
            }
        }
    }
    let amp = rng.gen_range(0.02..0.06);
    for v in pixels.iter_mut() {
        *v = (*v + rng.gen_range(-amp..amp)).clamp(0.0, 1.0);
    }
    Image {
        height: h,
        width: w,
        pixels,
    }
}

const DEPTH_KINDS: [DepthKind; 3] = [DepthKind::Ramp, DepthKind::Constant, DepthKind::Radial];

/// Deterministic dataset: pair `i` draws everything from an RNG stream
/// keyed by `(seed, i)`, so the result does not depend on generation order.
pub fn make_dataset(
    seed: u64,
    n_pairs: usize,
    height: usize,
    width: usize,
    beta_range: (f64, f64),
    airlight_range: (f64, f64),
) -> Result<Vec<Pair>> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("empty image dims".into()));
    }
    if !(0.0 <= beta_range.0 && beta_range.0 <= beta_range.1) {
        return Err(Error::InvalidArgument(format!(
            "bad beta range {beta_range:?}"
        )));
    }
    if !(0.0 <= airlight_range.0
        && airlight_range.0 <= airlight_range.1
        && airlight_range.1 <= 1.0)
    {
        return Err(Error::InvalidArgument(format!(
            "bad airlight range {airlight_range:?}"
        )));
    }
    (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let clean = procedural_clean(&mut rng, height, width);
            let depth_kind = DEPTH_KINDS[rng.gen_range(0..3)];
            let scale = rng.gen_range(0.5..2.0);
            let depth = make_depth(depth_kind, height, width, scale);
            let beta = if beta_range.0 < beta_range.1 {
                rng.gen_range(beta_range.0..beta_range.1)
            } else {
                beta_range.0
            };
            let airlight = if airlight_range.0 < airlight_range.1 {
                rng.gen_range(airlight_range.0..airlight_range.1)
            } else {
                airlight_range.0
            };
            let hazy = synthesize_haze(&clean, &depth, &HazeParams::new(beta, airlight)?)?;
            Ok(Pair {
                hazy,
                clean,
                beta,
                airlight,
                depth_kind,
            })
        })
        .collect()
}

/// Manifest row; paths are resolved against the manifest's directory.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub hazy_path: PathBuf,
    pub clean_path: PathBuf,
    pub beta: f64,
    pub airlight: f64,
    pub depth_kind: DepthKind,
}

/// Writes `hazy_NNN.ppm` / `clean_NNN.ppm` plus `manifest.tsv` into `dir`
/// and returns the manifest path.
pub fn write_dataset(dir: &Path, pairs: &[Pair]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let hazy_name = format!("hazy_{i:03}.ppm");
        let clean_name = format!("clean_{i:03}.ppm");
        save_ppm(&pair.hazy, &dir.join(&hazy_name))?;
        save_ppm(&pair.clean, &dir.join(&clean_name))?;
        manifest.push_str(&format!(
            "{hazy_name}\t{clean_name}\t{}\t{}\t{}\n",
            pair.beta, pair.airlight, pair.depth_kind
        ));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let fail = |msg: String| Error::ManifestParse {
            line: i + 1,
            msg,
        };
        if fields.len() != 5 {
            return Err(fail(format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let beta: f64 = fields[2]
            .parse()
            .map_err(|_| fail(format!("bad beta {:?}", fields[2])))?;
        let airlight: f64 = fields[3]
            .parse()
            .map_err(|_| fail(format!("bad airlight {:?}", fields[3])))?;
        let depth_kind =
            DepthKind::parse(fields[4]).map_err(|e| fail(e.to_string()))?;
        entries.push(ManifestEntry {
            hazy_path: base.join(fields[0]),
            clean_path: base.join(fields[1]),
            beta,
            airlight,
            depth_kind,
        });
    }
    Ok(entries)
}
