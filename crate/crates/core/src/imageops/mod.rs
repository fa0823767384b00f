//! Grayscale image grids and the corruption families used to build rejected images:
//! Gaussian blur, pixelation, semantic (region) editing, and resize degradation.

mod pgm;

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::pairwise_sum;
use crate::error::{Error, Result};

/// Row-major grayscale raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Parameter(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter(format!(
                "pixel {i} = {} outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(ImageGrid {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        pairwise_sum(&self.pixels) / self.pixels.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let sq: Vec<f64> = self.pixels.iter().map(|p| (p - m) * (p - m)).collect();
        pairwise_sum(&sq) / sq.len() as f64
    }

    /// Snaps every pixel to the 8-bit grid `k/255`, matching what a PGM round trip yields.
    pub fn quantized(&self) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|p| pgm::quantize_byte(*p) as f64 / 255.0)
                .collect(),
        }
    }

    /// Number of pixels that differ bitwise from `other` (dimensions must match).
    pub fn diff_count(&self, other: &ImageGrid) -> usize {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count()
    }

    fn with_pixels(&self, pixels: Vec<f64>) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    fn fits(&self, img: &ImageGrid) -> bool {
        self.width > 0
            && self.height > 0
            && self.x + self.width <= img.width
            && self.y + self.height <= img.height
    }
}

/// How a semantic edit repaints its region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FillMode {
    /// Uniform noise from a seeded generator.
    Noise,
    Constant { value: f64 },
    /// Copy of the same-sized patch whose top-left corner is `(src_x, src_y)`.
    DonorPatch { src_x: usize, src_y: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Blur,
    Pixelate,
    Semantic,
    Resize,
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CorruptionKind::Blur => "blur",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Semantic => "semantic",
            CorruptionKind::Resize => "resize",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(CorruptionKind::Blur),
            "pixelate" => Ok(CorruptionKind::Pixelate),
            "semantic" => Ok(CorruptionKind::Semantic),
            "resize" => Ok(CorruptionKind::Resize),
            other => Err(Error::Parameter(format!("unknown corruption kind {other:?}"))),
        }
    }
}

/// A fully specified corruption. Serializes as `{"kind": ..., "params": {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum CorruptionSpec {
    Blur { kernel_size: usize },
    Pixelate { block_size: usize },
    Semantic { region: Rect, fill: FillMode },
    Resize { factor: f64 },
}

/// Result of applying a [`CorruptionSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub image: ImageGrid,
    /// Set for semantic edits only.
    pub area_fraction: Option<f64>,
}

impl CorruptionSpec {
    pub fn kind(&self) -> CorruptionKind {
        match self {
            CorruptionSpec::Blur { .. } => CorruptionKind::Blur,
            CorruptionSpec::Pixelate { .. } => CorruptionKind::Pixelate,
            CorruptionSpec::Semantic { .. } => CorruptionKind::Semantic,
            CorruptionSpec::Resize { .. } => CorruptionKind::Resize,
        }
    }

    /// Builds the corruption for `kind` at a scalar severity `level`
    /// (kernel size, block size, or downscale factor). Semantic edits have no level.
    pub fn at_level(kind: CorruptionKind, level: f64) -> Result<Self> {
        // level 0 is accepted as the identity alongside 1
        let level = if level == 0.0 { 1.0 } else { level };
        let as_size = |what: &str| -> Result<usize> {
            if level >= 1.0 && level.fract() == 0.0 {
                Ok(level as usize)
            } else {
                Err(Error::Parameter(format!(
                    "{what} level must be a positive integer, got {level}"
                )))
            }
        };
        match kind {
            CorruptionKind::Blur => {
                let k = as_size("blur")?;
                if k % 2 == 0 {
                    return Err(Error::Parameter(format!("blur level {k} must be odd")));
                }
                Ok(CorruptionSpec::Blur { kernel_size: k })
            }
            CorruptionKind::Pixelate => Ok(CorruptionSpec::Pixelate {
                block_size: as_size("pixelate")?,
            }),
            CorruptionKind::Resize => {
                if level >= 1.0 && level.is_finite() {
                    Ok(CorruptionSpec::Resize { factor: level })
                } else {
                    Err(Error::Parameter(format!("resize level must be >= 1, got {level}")))
                }
            }
            CorruptionKind::Semantic => Err(Error::Parameter(
                "semantic edits have no severity level".into(),
            )),
        }
    }

    /// Applies the corruption; `seed` drives the noise fill of semantic edits.
    pub fn apply(&self, img: &ImageGrid, seed: u64) -> Result<Corrupted> {
        match *self {
            CorruptionSpec::Blur { kernel_size } => Ok(Corrupted {
                image: gaussian_blur(img, kernel_size)?,
                area_fraction: None,
            }),
            CorruptionSpec::Pixelate { block_size } => Ok(Corrupted {
                image: pixelate(img, block_size)?,
                area_fraction: None,
            }),
            CorruptionSpec::Semantic { region, fill } => {
                let (image, frac) = semantic_edit(img, region, fill, seed)?;
                Ok(Corrupted {
                    image,
                    area_fraction: Some(frac),
                })
            }
            CorruptionSpec::Resize { factor } => Ok(Corrupted {
                image: resize_degrade(img, factor)?,
                area_fraction: None,
            }),
        }
    }
}

/// Maps a requested (possibly even) kernel size to the next odd size.
pub fn odd_kernel_size(requested: usize) -> usize {
    if requested % 2 == 0 {
        requested + 1
    } else {
        requested
    }
}

/// Standard deviation used for a blur of the given kernel size.
pub fn blur_sigma(kernel_size: usize) -> f64 {
    kernel_size as f64 / 6.0
}

/// Normalized 1-D Gaussian taps, `σ = kernel_size / 6`.
pub fn gaussian_kernel(kernel_size: usize) -> Result<Vec<f64>> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::Parameter(format!(
            "kernel size must be odd and positive, got {kernel_size}"
        )));
    }
    let radius = (kernel_size / 2) as f64;
    let sigma = blur_sigma(kernel_size);
    let raw: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let d = i as f64 - radius;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total = pairwise_sum(&raw);
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Half-sample symmetric reflection of `i` into `[0, n)`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

pub fn gaussian_blur(img: &ImageGrid, kernel_size: usize) -> Result<ImageGrid> {
    let kernel = gaussian_kernel(kernel_size)?;
    let limit = 2 * img.width.min(img.height) + 1;
    if kernel_size > limit {
        return Err(Error::Parameter(format!(
            "kernel size {kernel_size} exceeds {limit} for a {}x{} image",
            img.width, img.height
        )));
    }
    if kernel_size == 1 {
        return Ok(img.clone());
    }
    let r = (kernel_size / 2) as isize;
    let (w, h) = (img.width, img.height);

    let mut horiz = vec![0.0; w * h];
    for y in 0..h {
        let row = &img.pixels[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * row[reflect(x as isize + j as isize - r, w)];
            }
            horiz[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * horiz[reflect(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    Ok(img.with_pixels(out))
}

/// Mean of a tile, returning the shared value exactly when the tile is uniform.
fn tile_mean(img: &ImageGrid, xs: std::ops::Range<usize>, ys: std::ops::Range<usize>) -> f64 {
    let first = img.get(xs.start, ys.start);
    let mut uniform = true;
    let mut vals = Vec::with_capacity(xs.len() * ys.len());
    for y in ys {
        for x in xs.clone() {
            let v = img.get(x, y);
            uniform &= v.to_bits() == first.to_bits();
            vals.push(v);
        }
    }
    if uniform {
        first
    } else {
        (pairwise_sum(&vals) / vals.len() as f64).clamp(0.0, 1.0)
    }
}

/// Replaces every tile of a partition by its mean. `xb`/`yb` hold tile boundaries.
fn fill_tiles(img: &ImageGrid, xb: &[usize], yb: &[usize]) -> ImageGrid {
    let mut out = img.pixels.clone();
    for ty in yb.windows(2) {
        for tx in xb.windows(2) {
            let m = tile_mean(img, tx[0]..tx[1], ty[0]..ty[1]);
            for y in ty[0]..ty[1] {
                out[y * img.width + tx[0]..y * img.width + tx[1]].fill(m);
            }
        }
    }
    img.with_pixels(out)
}

fn block_bounds(n: usize, block: usize) -> Vec<usize> {
    let mut b: Vec<usize> = (0..n).step_by(block).collect();
    b.push(n);
    b
}

/// Boundaries of `parts` near-equal segments of `0..n`.
pub(crate) fn balanced_bounds(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|i| i * n / parts).collect()
}

pub fn pixelate(img: &ImageGrid, block_size: usize) -> Result<ImageGrid> {
    if block_size == 0 {
        return Err(Error::Parameter("block size must be at least 1".into()));
    }
    if block_size == 1 {
        return Ok(img.clone());
    }
    Ok(fill_tiles(
        img,
        &block_bounds(img.width, block_size),
        &block_bounds(img.height, block_size),
    ))
}

/// Repaints `region` and reports the fraction of the image it covers.
pub fn semantic_edit(
    img: &ImageGrid,
    region: Rect,
    fill: FillMode,
    seed: u64,
) -> Result<(ImageGrid, f64)> {
    if !region.fits(img) {
        return Err(Error::Parameter(format!(
            "region {region:?} outside {}x{} image",
            img.width, img.height
        )));
    }
    let mut out = img.pixels.clone();
    match fill {
        FillMode::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for y in region.y..region.y + region.height {
                for x in region.x..region.x + region.width {
                    out[y * img.width + x] = rng.gen::<f64>();
                }
            }
        }
        FillMode::Constant { value } => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Parameter(format!("fill value {value} outside [0, 1]")));
            }
            for y in region.y..region.y + region.height {
                out[y * img.width + region.x..y * img.width + region.x + region.width].fill(value);
            }
        }
        FillMode::DonorPatch { src_x, src_y } => {
            let donor = Rect {
                x: src_x,
                y: src_y,
                ..region
            };
            if !donor.fits(img) {
                return Err(Error::Parameter(format!(
                    "donor patch {donor:?} outside {}x{} image",
                    img.width, img.height
                )));
            }
            for dy in 0..region.height {
                for dx in 0..region.width {
                    out[(region.y + dy) * img.width + region.x + dx] =
                        img.get(src_x + dx, src_y + dy);
                }
            }
        }
    }
    let frac = region.area() as f64 / (img.width * img.height) as f64;
    Ok((img.with_pixels(out), frac))
}

/// Box-filter downscale by `factor`, then nearest-neighbour upscale to the original size.
pub fn resize_degrade(img: &ImageGrid, factor: f64) -> Result<ImageGrid> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::Parameter(format!("resize factor must be >= 1, got {factor}")));
    }
    let sw = (img.width as f64 / factor).floor() as usize;
    let sh = (img.height as f64 / factor).floor() as usize;
    if sw == 0 || sh == 0 {
        return Err(Error::Parameter(format!(
            "factor {factor} collapses a {}x{} image",
            img.width, img.height
        )));
    }
    if sw == img.width && sh == img.height {
        return Ok(img.clone());
    }
    Ok(fill_tiles(
        img,
        &balanced_bounds(img.width, sw),
        &balanced_bounds(img.height, sh),
    ))
}
