//! Colour-coded prior images built from stacks of class-agnostic binary masks.
//!
//! A stack of `K` proposal masks is zero-padded to the palette capacity `N` and mapped
//! through the fixed linear colour map `image[:, y, x] = Σ_n mask[n, y, x] · A[n, :]`.
//! Overlapping proposals add; clamping to `[0, 1]` happens only when an image is exported.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::imageio;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_CAPACITY: usize = 100;

/// `K×H×W` binary masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskStack {
    planes: usize,
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl MaskStack {
    pub fn new(planes: usize, height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask planes must be non-empty, got {height}x{width}")));
        }
        if bits.len() != planes * height * width {
            return Err(Error::Shape(format!(
                "{planes}x{height}x{width} stack needs {} values, got {}",
                planes * height * width,
                bits.len()
            )));
        }
        if let Some(v) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Format(format!("mask value {v} is not binary")));
        }
        Ok(MaskStack {
            planes,
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(0, height, width, Vec::new())
    }

    /// Builds a stack from per-plane boolean maps.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<bool>]) -> Result<Self> {
        let bits = planes.iter().flat_map(|p| p.iter().map(|&b| b as u8)).collect();
        Self::new(planes.len(), height, width, bits)
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn plane(&self, n: usize) -> &[u8] {
        let hw = self.height * self.width;
        &self.bits[n * hw..(n + 1) * hw]
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> bool {
        self.bits[(n * self.height + y) * self.width + x] == 1
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [self.planes, self.height, self.width],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("stack shape")
    }

    /// Elementwise sum; errors when the result is not binary.
    pub fn union_disjoint(&self, other: &MaskStack) -> Result<MaskStack> {
        if (self.planes, self.height, self.width) != (other.planes, other.height, other.width) {
            return Err(Error::dim(
                "union_disjoint",
                &[self.planes, self.height, self.width],
                &[other.planes, other.height, other.width],
            ));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a + b).collect();
        MaskStack::new(self.planes, self.height, self.width, bits)
    }

    /// Reads one binary PGM per plane (`> 127` is foreground).
    pub fn read_pgm_planes(paths: &[impl AsRef<Path>]) -> Result<MaskStack> {
        let mut planes = Vec::with_capacity(paths.len());
        let mut dims = None;
        for p in paths {
            let (w, h, gray) = imageio::read_pgm(p.as_ref())?;
            if *dims.get_or_insert((h, w)) != (h, w) {
                return Err(Error::Shape(format!(
                    "mask {} is {w}x{h}, expected {:?}",
                    p.as_ref().display(),
                    dims
                )));
            }
            planes.push(gray.iter().map(|&g| g > 127).collect::<Vec<bool>>());
        }
        let (h, w) = dims.ok_or_else(|| Error::Shape("no mask planes given".into()))?;
        MaskStack::from_planes(h, w, &planes)
    }

    /// Binary PGM (0/255) of one plane.
    pub fn plane_pgm(&self, n: usize) -> Vec<u8> {
        let gray: Vec<u8> = self.plane(n).iter().map(|&b| b * 255).collect();
        imageio::encode_pgm(self.width, self.height, &gray)
    }
}

/// Zero-pads `K` planes up to capacity `n`.
pub fn pad_masks(stack: &MaskStack, n: usize) -> Result<MaskStack> {
    if stack.planes > n {
        return Err(Error::Capacity { k: stack.planes, n });
    }
    let mut bits = stack.bits.clone();
    bits.resize(n * stack.height * stack.width, 0);
    MaskStack::new(n, stack.height, stack.width, bits)
}

/// `N×3` colour matrix with 8-bit rows, interpreted as `row / 255`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    rows: Vec<[u8; 3]>,
}

/// Smallest channel value of generated colours, keeping every row well away from black.
const MIN_CHANNEL: u32 = 32;

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

impl Palette {
    pub fn new(rows: Vec<[u8; 3]>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(rows.len());
        for r in &rows {
            if !seen.insert(*r) {
                return Err(Error::Format(format!("duplicate palette row {r:?}")));
            }
        }
        Ok(Palette { rows })
    }

    /// Seeded low-discrepancy colours: a rotated Halton sequence in bases 2, 3, 5 quantised to
    /// 8 bits, skipping repeats so rows stay at least one quantisation step apart.
    pub fn generate(n: usize, seed: u64) -> Result<Self> {
        if n > 256 * 256 * 256 {
            return Err(Error::Parameter(format!("palette capacity {n} exceeds 256^3")));
        }
        let span = 256 - MIN_CHANNEL;
        if n > (span * span * span) as usize {
            return Err(Error::Generation(format!(
                "{n} colours cannot be separated within the generated range"
            )));
        }
        let mut r = rng::stream(seed, "palette");
        let shift: [f64; 3] = [r.random(), r.random(), r.random()];
        let mut rows = Vec::with_capacity(n);
        let mut seen = HashSet::with_capacity(n);
        let budget = 64 * n as u64 + 1024;
        let mut i = 1u64;
        while rows.len() < n {
            if i > budget {
                return Err(Error::Generation(format!(
                    "only {} distinct colours found for capacity {n}",
                    rows.len()
                )));
            }
            let mut c = [0u8; 3];
            for (ch, base) in [2u64, 3, 5].into_iter().enumerate() {
                let u = (radical_inverse(i, base) + shift[ch]).fract();
                c[ch] = (MIN_CHANNEL + (u * span as f64).floor() as u32).min(255) as u8;
            }
            if seen.insert(c) {
                rows.push(c);
            }
            i += 1;
        }
        Ok(Palette { rows })
    }

    /// Palette from `file` when it exists, otherwise a generated one.
    pub fn default_palette(n: usize, seed: u64, file: Option<&Path>) -> Result<Self> {
        match file {
            Some(path) if path.exists() => {
                let p = Self::read(path)?;
                if p.len() != n {
                    return Err(Error::Format(format!(
                        "palette {} has {} rows, expected {n}",
                        path.display(),
                        p.len()
                    )));
                }
                Ok(p)
            }
            _ => Self::generate(n, seed),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[[u8; 3]] {
        &self.rows
    }

    pub fn color(&self, n: usize) -> [f64; 3] {
        self.rows[n].map(|v| v as f64 / 255.0)
    }

    /// The colour map as an `N×3` matrix.
    pub fn matrix(&self) -> Tensor {
        Tensor::from_fn([self.rows.len(), 3], |i| self.rows[i / 3][i % 3] as f64 / 255.0)
    }

    /// Smallest L∞ distance between two rows, in 8-bit steps.
    pub fn min_separation(&self) -> Option<u8> {
        let mut best = None;
        for i in 0..self.rows.len() {
            for j in i + 1..self.rows.len() {
                let d = (0..3)
                    .map(|c| self.rows[i][c].abs_diff(self.rows[j][c]))
                    .max()
                    .unwrap();
                best = Some(best.map_or(d, |b: u8| b.min(d)));
            }
        }
        best
    }

    pub fn to_text(&self) -> String {
        self.rows
            .iter()
            .map(|[r, g, b]| format!("{r} {g} {b}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<u8> = line
                .split_whitespace()
                .map(|v| v.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("palette line {}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(Error::Format(format!(
                    "palette line {} has {} values, expected 3",
                    lineno + 1,
                    vals.len()
                )));
            }
            rows.push([vals[0], vals[1], vals[2]]);
        }
        Palette::new(rows)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// `3×H×W` prior image.
#[derive(Clone, Debug, PartialEq)]
pub struct Maskige {
    pub image: Tensor,
}

impl Maskige {
    /// Binary PPM with values `round(255·clamp(x, 0, 1))`.
    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        let (w, h, rgb) = imageio::chw_to_rgb(&self.image)?;
        Ok(imageio::encode_ppm(w, h, &rgb))
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (w, h, rgb) = imageio::decode_ppm(bytes)?;
        Ok(Maskige {
            image: imageio::rgb_to_chw(w, h, &rgb),
        })
    }
}

/// Applies the colour map to a stack already padded to the palette capacity.
pub fn encode(stack: &MaskStack, palette: &Palette) -> Result<Maskige> {
    if stack.planes != palette.len() {
        return Err(Error::dim(
            "maskige encode",
            &[stack.planes, stack.height, stack.width],
            &[palette.len(), 3],
        ));
    }
    let hw = stack.height * stack.width;
    let mut image = vec![0.0; 3 * hw];
    for n in 0..stack.planes {
        let color = palette.color(n);
        for (p, &b) in stack.plane(n).iter().enumerate() {
            if b == 1 {
                for c in 0..3 {
                    image[c * hw + p] += color[c];
                }
            }
        }
    }
    Ok(Maskige {
        image: Tensor::new([3, stack.height, stack.width], image)?,
    })
}

/// Pads `stack` to the palette capacity, then encodes.
pub fn encode_proposals(stack: &MaskStack, palette: &Palette) -> Result<Maskige> {
    encode(&pad_masks(stack, palette.len())?, palette)
}

/// Nearest-colour inverse of [`encode`] for images built from disjoint masks. Black pixels
/// belong to no plane.
pub fn decode_nearest(maskige: &Maskige, palette: &Palette) -> Result<MaskStack> {
    let s = maskige.image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("maskige must be 3xHxW, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let img = maskige.image.data();
    let colors: Vec<[f64; 3]> = (0..palette.len()).map(|n| palette.color(n)).collect();
    let mut bits = vec![0u8; palette.len() * hw];
    for p in 0..hw {
        let px = [img[p], img[hw + p], img[2 * hw + p]];
        if px == [0.0; 3] {
            continue;
        }
        let best = colors
            .iter()
            .enumerate()
            .map(|(n, c)| {
                let d: f64 = (0..3).map(|k| (c[k] - px[k]) * (c[k] - px[k])).sum();
                (n, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n);
        if let Some(n) = best {
            bits[n * hw + p] = 1;
        }
    }
    MaskStack::new(palette.len(), h, w, bits)
}
