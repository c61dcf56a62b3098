//! Procedural dot-scene generator with Gaussian-kernel density ground truth.
//!
//! Every scene is a pure function of `(DomainSpec, seed)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NltError, Result};
use crate::tensor::Tensor;

/// Ground-truth kernel width in pixels.
pub const SIGMA_GT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    /// Vertical ramp from 0.15 (top) to 0.55 (bottom).
    Gradient,
    /// Constant 0.35.
    Flat,
}

impl Background {
    fn level(self, row: usize, height: usize) -> f64 {
        match self {
            Background::Gradient => {
                let t = if height > 1 {
                    row as f64 / (height - 1) as f64
                } else {
                    0.0
                };
                0.15 + 0.4 * t
            }
            Background::Flat => 0.35,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Background::Gradient => "gradient",
            Background::Flat => "flat",
        }
    }
}

impl std::str::FromStr for Background {
    type Err = NltError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Background::Gradient),
            "flat" => Ok(Background::Flat),
            other => Err(NltError::InvalidArgument(format!(
                "unknown background {other:?} (expected gradient or flat)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// Inclusive person-count range.
    pub count_range: (usize, usize),
    pub blob_sigma_px: f64,
    pub background: Background,
    pub brightness: f64,
    pub noise_std: f64,
    /// `(H, W)`, both multiples of 8.
    pub image_size: (usize, usize),
}

impl DomainSpec {
    /// Bright scenes over a gradient background, small blobs, little noise.
    pub fn default_source() -> Self {
        DomainSpec {
            name: "source".into(),
            count_range: (5, 40),
            blob_sigma_px: 2.0,
            background: Background::Gradient,
            brightness: 0.9,
            noise_std: 0.01,
            image_size: (64, 64),
        }
    }

    /// Dim scenes over a flat background, wider blobs, more noise.
    pub fn default_target() -> Self {
        DomainSpec {
            name: "target".into(),
            count_range: (5, 25),
            blob_sigma_px: 3.0,
            background: Background::Flat,
            brightness: 0.4,
            noise_std: 0.05,
            image_size: (64, 64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NltError::InvalidArgument(format!("domain {:?}: {m}", self.name)));
        let (lo, hi) = self.count_range;
        if lo > hi {
            return fail(format!("count_range min {lo} exceeds max {hi}"));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return fail(format!("image_size {h}x{w} must be non-zero multiples of 8"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.brightness) {
            return fail(format!("brightness must lie in [0, 1], got {}", self.brightness));
        }
        if !(self.blob_sigma_px > 0.0 && self.blob_sigma_px.is_finite()) {
            return fail(format!("blob_sigma_px must be > 0, got {}", self.blob_sigma_px));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `(row, col)` in pixel units; pixel `(r, c)` covers `[r, r+1) x [c, c+1)`.
    pub points: Vec<(f32, f32)>,
    /// `[1, 1, H, W]` ground-truth density.
    pub density: Tensor,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Renders one scene.
pub fn generate_scene(spec: &DomainSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = spec.image_size;
    let (lo, hi) = spec.count_range;
    let count = rng.random_range(lo..=hi);
    let points: Vec<(f32, f32)> = (0..count)
        .map(|_| {
            let r = rng.random_range(0.0..h as f32);
            let c = rng.random_range(0.0..w as f32);
            (r, c)
        })
        .collect();

    let mut canvas = vec![0.0f64; h * w];
    for (r, row) in canvas.chunks_exact_mut(w).enumerate() {
        row.fill(spec.background.level(r, h));
    }
    let sigma = spec.blob_sigma_px;
    let radius = (3.0 * sigma).ceil() as isize;
    for &(pr, pc) in &points {
        splat(&mut canvas, (h, w), (pr as f64, pc as f64), radius, |d2| {
            (-d2 / (2.0 * sigma * sigma)).exp()
        });
    }
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("validated"));
    let image: Vec<f32> = canvas
        .iter()
        .map(|&v| {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            (spec.brightness * v + n).clamp(0.0, 1.0) as f32
        })
        .collect();

    let density = density_from_points(&points, SIGMA_GT, spec.image_size)?;
    Ok(Sample {
        image: Tensor::new(&[1, 1, h, w], image)?,
        points,
        density,
        count,
    })
}

/// Adds `kernel(d^2)` at every pixel centre within `radius` pixels of `centre`
/// (and within distance `radius`), clipped to the image.
fn splat(
    canvas: &mut [f64],
    (h, w): (usize, usize),
    (pr, pc): (f64, f64),
    radius: isize,
    kernel: impl Fn(f64) -> f64,
) {
    let (cr, cc) = (pr.floor() as isize, pc.floor() as isize);
    let r2max = (radius * radius) as f64;
    for r in cr - radius..=cr + radius {
        if r < 0 || r >= h as isize {
            continue;
        }
        for c in cc - radius..=cc + radius {
            if c < 0 || c >= w as isize {
                continue;
            }
            let dr = r as f64 + 0.5 - pr;
            let dc = c as f64 + 0.5 - pc;
            let d2 = dr * dr + dc * dc;
            if d2 <= r2max {
                canvas[r as usize * w + c as usize] += kernel(d2);
            }
        }
    }
}

/// Sum of unit-mass Gaussian kernels truncated at radius `3 sigma` and
/// renormalized after truncation. Mass falling outside the image is lost.
pub fn density_from_points(
    points: &[(f32, f32)],
    sigma_gt: f64,
    (h, w): (usize, usize),
) -> Result<Tensor> {
    if !(sigma_gt > 0.0 && sigma_gt.is_finite()) {
        return Err(NltError::InvalidArgument(format!(
            "sigma_gt must be > 0, got {sigma_gt}"
        )));
    }
    let radius = 3.0 * sigma_gt;
    let reach = radius.ceil() as isize;
    let gauss = |d2: f64| (-d2 / (2.0 * sigma_gt * sigma_gt)).exp();
    let mut map = vec![0.0f64; h * w];
    for &(pr, pc) in points {
        let (pr, pc) = (pr as f64, pc as f64);
        // mass of the truncated kernel over the unclipped window
        let (cr, cc) = (pr.floor() as isize, pc.floor() as isize);
        let mut mass = 0.0;
        for r in cr - reach..=cr + reach {
            for c in cc - reach..=cc + reach {
                let dr = r as f64 + 0.5 - pr;
                let dc = c as f64 + 0.5 - pc;
                let d2 = dr * dr + dc * dc;
                if d2 <= radius * radius {
                    mass += gauss(d2);
                }
            }
        }
        for r in cr - reach..=cr + reach {
            if r < 0 || r >= h as isize {
                continue;
            }
            for c in cc - reach..=cc + reach {
                if c < 0 || c >= w as isize {
                    continue;
                }
                let dr = r as f64 + 0.5 - pr;
                let dc = c as f64 + 0.5 - pc;
                let d2 = dr * dr + dc * dc;
                if d2 <= radius * radius {
                    map[r as usize * w + c as usize] += gauss(d2) / mass;
                }
            }
        }
    }
    Tensor::new(&[1, 1, h, w], map.into_iter().map(|v| v as f32).collect())
}

/// Train/val/test splits; sample `i` (counted across splits in that order)
/// uses seed `seed + i`.
pub fn build_split(spec: &DomainSpec, sizes: SplitSizes, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let gen = |offset: usize, n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|i| generate_scene(spec, seed.wrapping_add((offset + i) as u64)))
            .collect()
    };
    Ok(DatasetSplit {
        train: gen(0, sizes.train)?,
        val: gen(sizes.train, sizes.val)?,
        test: gen(sizes.train + sizes.val, sizes.test)?,
    })
}

/// Keeps the samples whose count lies in `[lo, hi]`, preserving order.
pub fn scene_regularization(source: Vec<Sample>, (lo, hi): (usize, usize)) -> Result<Vec<Sample>> {
    if lo > hi {
        return Err(NltError::InvalidArgument(format!(
            "scene regularization range min {lo} exceeds max {hi}"
        )));
    }
    let kept: Vec<Sample> = source
        .into_iter()
        .filter(|s| (lo..=hi).contains(&s.count))
        .collect();
    if kept.is_empty() {
        return Err(NltError::InvalidArgument(format!(
            "scene regularization to [{lo}, {hi}] removed every source sample; \
             widen the range so the source density range overlaps the target's"
        )));
    }
    Ok(kept)
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| NltError::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(NltError::InvalidArgument(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Writes one split as `NNNNN.img` / `NNNNN.den` (raw little-endian f32) and
/// `NNNNN.txt` ("row col" per line) files.
pub fn write_samples(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NltError::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:05}");
        let img = dir.join(format!("{stem}.img"));
        fs::write(&img, f32_bytes(s.image.data())).map_err(|e| NltError::io(&img, e))?;
        let den = dir.join(format!("{stem}.den"));
        fs::write(&den, f32_bytes(s.density.data())).map_err(|e| NltError::io(&den, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        let mut f = fs::File::create(&txt).map_err(|e| NltError::io(&txt, e))?;
        for (r, c) in &s.points {
            writeln!(f, "{r} {c}").map_err(|e| NltError::io(&txt, e))?;
        }
    }
    Ok(())
}

/// Reads a directory written by [`write_samples`].
pub fn read_samples(dir: &Path, (h, w): (usize, usize)) -> Result<Vec<Sample>> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(|e| NltError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".img").map(str::to_owned)
        })
        .collect();
    stems.sort();
    stems
        .into_iter()
        .map(|stem| {
            let image = read_f32s(&dir.join(format!("{stem}.img")), h * w)?;
            let density = read_f32s(&dir.join(format!("{stem}.den")), h * w)?;
            let txt = dir.join(format!("{stem}.txt"));
            let text = fs::read_to_string(&txt).map_err(|e| NltError::io(&txt, e))?;
            let points = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    let mut it = l.split_whitespace().map(str::parse::<f32>);
                    match (it.next(), it.next(), it.next()) {
                        (Some(Ok(r)), Some(Ok(c)), None) => Ok((r, c)),
                        _ => Err(NltError::InvalidArgument(format!(
                            "{}: malformed point line {l:?}",
                            txt.display()
                        ))),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample {
                image: Tensor::new(&[1, 1, h, w], image)?,
                density: Tensor::new(&[1, 1, h, w], density)?,
                count: points.len(),
                points,
            })
        })
        .collect()
}
