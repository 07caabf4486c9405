//! Procedural sprite dataset: small raster images of one anti-aliased disc
//! per image, with four class patterns distinct in both color and texture
//! (solid red, blue with white stripes, green with dots, orange with a dark
//! ring). Position, scale, and pattern rotation are random; the disc always
//! stays fully inside the canvas and the background is exact white (+1).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Dataset;

pub const NUM_CLASSES: usize = 4;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SpriteConfig {
    /// Pixels per side.
    pub image_size: usize,
    /// Disc diameter range as a fraction of the image side.
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            scale_min: 0.2,
            scale_max: 0.35,
            seed: 0,
        }
    }
}

impl SpriteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid("image_size must be >= 8"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 0.5) {
            return Err(Error::invalid(
                "scale range must satisfy 0 < min <= max <= 0.5",
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.image_size * self.image_size * CHANNELS
    }
}

/// Generated images (rows are flattened pixels in [-1, 1]) plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteDataset {
    pub config: SpriteConfig,
    pub pixels: Array2<f32>,
    pub labels: Vec<u8>,
}

impl SpriteDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Widen to the f64 training representation.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            points: self.pixels.mapv(f64::from),
            labels: self.labels.iter().map(|&y| y as usize).collect(),
            num_classes: NUM_CLASSES,
        }
    }
}

/// One disc pattern color at rotated local coordinates (u, v) in disc units
/// and normalized radius rr in [0, 1]. Colors are in [0, 1].
fn pattern(class: u8, u: f64, v: f64, rr: f64) -> [f64; 3] {
    match class {
        // solid red
        0 => [0.85, 0.08, 0.08],
        // blue with white stripes across the rotated axis
        1 => {
            let band = (u / 0.45).floor() as i64;
            if band.rem_euclid(2) == 0 {
                [1.0, 1.0, 1.0]
            } else {
                [0.10, 0.20, 0.85]
            }
        }
        // green with white dots on a rotated lattice
        2 => {
            let gu = u - 0.55 * (u / 0.55).round();
            let gv = v - 0.55 * (v / 0.55).round();
            if (gu * gu + gv * gv).sqrt() <= 0.18 {
                [1.0, 1.0, 1.0]
            } else {
                [0.05, 0.60, 0.10]
            }
        }
        // orange with a dark ring
        _ => {
            if (0.55..=0.8).contains(&rr) {
                [0.25, 0.12, 0.03]
            } else {
                [0.95, 0.55, 0.05]
            }
        }
    }
}

/// Render one sprite into a flattened pixel row. 3x3 subsampling per pixel;
/// pure-background pixels come out exactly +1.
fn render(cfg: &SpriteConfig, class: u8, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let s = cfg.image_size as f64;
    let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
    let radius = scale * s / 2.0;
    let cx = rng.gen_range(radius..=(s - radius));
    let cy = rng.gen_range(radius..=(s - radius));
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin_t, cos_t) = theta.sin_cos();

    const SUB: usize = 3;
    let offsets: [f64; SUB] = [0.5 / 3.0, 1.5 / 3.0, 2.5 / 3.0];
    for py in 0..cfg.image_size {
        for px in 0..cfg.image_size {
            let mut acc = [0.0f64; 3];
            for oy in offsets {
                for ox in offsets {
                    let x = px as f64 + ox;
                    let y = py as f64 + oy;
                    let dx = x - cx;
                    let dy = y - cy;
                    let dist = (dx * dx + dy * dy).sqrt();
                    if dist <= radius {
                        let u = (cos_t * dx + sin_t * dy) / radius;
                        let v = (-sin_t * dx + cos_t * dy) / radius;
                        let c = pattern(class, u, v, dist / radius);
                        acc[0] += c[0];
                        acc[1] += c[1];
                        acc[2] += c[2];
                    } else {
                        acc[0] += 1.0;
                        acc[1] += 1.0;
                        acc[2] += 1.0;
                    }
                }
            }
            let base = (py * cfg.image_size + px) * CHANNELS;
            for ch in 0..CHANNELS {
                // map [0,1] to [-1,1]; 9 background samples average to exactly 1
                out[base + ch] = (2.0 * (acc[ch] / 9.0) - 1.0) as f32;
            }
        }
    }
}

/// Generate `n` labeled sprites, deterministic per config seed.
pub fn generate(cfg: &SpriteConfig, n: usize) -> Result<SpriteDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let dim = cfg.dim();
    let mut pixels = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..n {
        let class = rng.gen_range(0..NUM_CLASSES as u8);
        labels.push(class);
        render(
            cfg,
            class,
            &mut rng,
            pixels.row_mut(i).as_slice_mut().unwrap(),
        );
    }
    Ok(SpriteDataset {
        config: cfg.clone(),
        pixels,
        labels,
    })
}

// ---------------------------------------------------------------------------
// dataset container format: header (magic, version, config echo, n, dim)
// then row-major little-endian f32 pixels, then one byte per label.

const DATA_MAGIC: [u8; 4] = *b"CGSD";
const DATA_VERSION: u32 = 1;

pub fn save_dataset(path: impl AsRef<std::path::Path>, data: &SpriteDataset) -> Result<()> {
    let cfg = &data.config;
    let n = data.len();
    let dim = cfg.dim();
    let mut out = Vec::with_capacity(64 + n * (dim * 4 + 1));
    out.extend_from_slice(&DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.image_size as u32).to_le_bytes());
    out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_CLASSES as u32).to_le_bytes());
    out.extend_from_slice(&cfg.scale_min.to_le_bytes());
    out.extend_from_slice(&cfg.scale_max.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in data.pixels.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&data.labels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<SpriteDataset> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Truncated {
                needed: *pos + n - bytes.len(),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
    if magic != DATA_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != DATA_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: DATA_VERSION,
        });
    }
    let image_size = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let num_classes = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if channels != CHANNELS || num_classes != NUM_CLASSES {
        return Err(Error::CorruptHeader(format!(
            "unsupported channels/classes {channels}/{num_classes}"
        )));
    }
    let scale_min = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let scale_max = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg = SpriteConfig {
        image_size,
        scale_min,
        scale_max,
        seed,
    };
    cfg.validate()
        .map_err(|e| Error::CorruptHeader(format!("config echo invalid: {e}")))?;
    if dim != cfg.dim() {
        return Err(Error::CorruptHeader(format!(
            "dim {dim} does not match image_size {image_size}"
        )));
    }
    let payload = n
        .checked_mul(dim)
        .and_then(|p| p.checked_mul(4))
        .and_then(|p| p.checked_add(n))
        .ok_or_else(|| Error::CorruptHeader("length overflow".into()))?;
    if bytes.len() - pos != payload {
        return Err(Error::CorruptHeader(format!(
            "payload length {} does not match header (expected {payload})",
            bytes.len() - pos
        )));
    }
    let mut pixels = Array2::zeros((n, dim));
    for v in pixels.iter_mut() {
        *v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    }
    let labels = take(&mut pos, n)?.to_vec();
    if labels.iter().any(|&y| y as usize >= NUM_CLASSES) {
        return Err(Error::CorruptHeader("label out of range".into()));
    }
    Ok(SpriteDataset {
        config: cfg,
        pixels,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SpriteConfig::default();
        let a = generate(&cfg, 32).unwrap();
        let b = generate(&cfg, 32).unwrap();
        assert_eq!(a, b);
        let c = generate(
            &SpriteConfig {
                seed: 1,
                ..cfg
            },
            32,
        )
        .unwrap();
        assert!(a != c);
    }

    #[test]
    fn pixel_range_and_labels_valid() {
        let data = generate(&SpriteConfig::default(), 64).unwrap();
        assert!(data.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(data.labels.iter().all(|&y| (y as usize) < NUM_CLASSES));
    }

    #[test]
    fn class_histogram_roughly_uniform() {
        let n = 10_000;
        let data = generate(&SpriteConfig::default(), n).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        for &y in &data.labels {
            counts[y as usize] += 1;
        }
        let bound = 4.0 * (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!(
                (c as f64 - n as f64 / 4.0).abs() <= bound,
                "count {c} outside {bound}"
            );
        }
    }

    #[test]
    fn background_dominates_when_discs_small() {
        let cfg = SpriteConfig {
            scale_min: 0.2,
            scale_max: 0.4,
            ..SpriteConfig::default()
        };
        let data = generate(&cfg, 50).unwrap();
        let dim = cfg.dim();
        let px_per_img = cfg.image_size * cfg.image_size;
        for row in data.pixels.rows() {
            let mut bg = 0usize;
            for p in 0..px_per_img {
                let all_white = (0..CHANNELS).all(|ch| row[p * CHANNELS + ch] == 1.0);
                bg += usize::from(all_white);
            }
            assert!(
                bg * 2 >= px_per_img,
                "background {bg} of {px_per_img} below half (dim {dim})"
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(SpriteConfig {
            image_size: 4,
            ..SpriteConfig::default()
        }
        .validate()
        .is_err());
        assert!(SpriteConfig {
            scale_min: 0.0,
            ..SpriteConfig::default()
        }
        .validate()
        .is_err());
        assert!(SpriteConfig {
            scale_max: 0.6,
            ..SpriteConfig::default()
        }
        .validate()
        .is_err());
        assert!(generate(&SpriteConfig::default(), 0).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_byte_identical() {
        let dir = std::env::temp_dir().join(format!("cglab-sprites-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.cgsd");
        let p2 = dir.join("b.cgsd");
        let data = generate(&SpriteConfig::default(), 20).unwrap();
        save_dataset(&p1, &data).unwrap();
        let loaded = load_dataset(&p1).unwrap();
        assert_eq!(data, loaded);
        save_dataset(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_corruption() {
        let dir = std::env::temp_dir().join(format!("cglab-sprites-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("x.cgsd");
        let data = generate(&SpriteConfig::default(), 8).unwrap();
        save_dataset(&p, &data).unwrap();
        let good = std::fs::read(&p).unwrap();

        // corrupted length header (n inflated; n sits after the 44-byte prefix)
        let mut bad = good.clone();
        bad[44] = bad[44].wrapping_add(1);
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(
            load_dataset(&p),
            Err(Error::CorruptHeader(_)) | Err(Error::Truncated { .. })
        ));

        // version mismatch
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(
            load_dataset(&p),
            Err(Error::FormatVersion { found: 9, .. })
        ));

        // truncated payload
        let mut bad = good.clone();
        bad.truncate(good.len() - 7);
        std::fs::write(&p, &bad).unwrap();
        assert!(load_dataset(&p).is_err());

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn labels_survive_roundtrip_spot_check() {
        use rand::{Rng, SeedableRng};
        let dir = std::env::temp_dir().join(format!("cglab-sprites-spot-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("s.cgsd");
        let data = generate(&SpriteConfig { seed: 5, ..SpriteConfig::default() }, 500).unwrap();
        save_dataset(&p, &data).unwrap();
        let loaded = load_dataset(&p).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let i = rng.gen_range(0..500);
            assert_eq!(data.labels[i], loaded.labels[i]);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
