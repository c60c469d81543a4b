//! Synthetic heterogeneous-domain benchmark: a shared binary content task
//! (is there a dense cluster of blobs?) rendered under per-domain styles
//! (color affine, spectrally tilted texture, pixel noise).

mod folder;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{fft2_in_place, is_power_of_two, Direction};
use crate::raster::{Dataset, Image};
use crate::trainer::{DomainSplits, DomainStream};

pub use folder::{export_png_tree, find_pngs, ingest_folder, load_png, read_png, save_png, to_rgb8};

/// Appearance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Row-major 3×3 matrix applied to every RGB pixel.
    pub color_affine: [[f32; 3]; 3],
    pub color_bias: [f32; 3],
    /// Exponent of the `1/f` falloff of the texture amplitude.
    pub spectral_tilt: f32,
    /// Standard deviation of the texture field before the color affine.
    pub texture_std: f32,
    pub noise_std: f32,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !(self.texture_std >= 0.0) || !self.spectral_tilt.is_finite() {
            return Err(Error::Config("domain noise/texture must be non-negative".into()));
        }
        Ok(())
    }
}

/// Geometry of the content canvas and the cluster rule that defines the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentRule {
    /// Blob centers within this distance count as neighbors.
    pub cluster_radius: f32,
    /// A blob with at least this many neighbors (itself included) makes the
    /// image positive.
    pub cluster_min: usize,
    /// Minimum center distance between blobs in negative images.
    pub min_separation: f32,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub blob_radius: (f32, f32),
    pub background: f32,
    pub blob_intensity: (f32, f32),
}

impl Default for ContentRule {
    fn default() -> Self {
        Self {
            cluster_radius: 7.0,
            cluster_min: 4,
            min_separation: 9.0,
            blobs_min: 4,
            blobs_max: 7,
            blob_radius: (1.5, 2.5),
            background: 0.1,
            blob_intensity: (0.6, 0.9),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub x: f32,
    pub y: f32,
    pub rx: f32,
    pub ry: f32,
    pub angle: f32,
    pub intensity: f32,
}

impl ContentRule {
    /// Label of a blob layout under the cluster rule.
    pub fn label(&self, blobs: &[Blob]) -> usize {
        let r2 = self.cluster_radius * self.cluster_radius;
        let dense = blobs.iter().any(|b| {
            blobs
                .iter()
                .filter(|o| (o.x - b.x).powi(2) + (o.y - b.y).powi(2) <= r2)
                .count()
                >= self.cluster_min
        });
        dense as usize
    }
}

/// Grayscale content image and its label. Style never touches either.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub size: usize,
    pub gray: Vec<f32>,
    pub blobs: Vec<Blob>,
    pub label: usize,
}

const PLACEMENT_TRIES: usize = 200;

fn random_blob<R: Rng + ?Sized>(rule: &ContentRule, x: f32, y: f32, rng: &mut R) -> Blob {
    Blob {
        x,
        y,
        rx: rng.random_range(rule.blob_radius.0..=rule.blob_radius.1),
        ry: rng.random_range(rule.blob_radius.0..=rule.blob_radius.1),
        angle: rng.random_range(0.0..std::f32::consts::PI),
        intensity: rng.random_range(rule.blob_intensity.0..=rule.blob_intensity.1),
    }
}

fn layout<R: Rng + ?Sized>(rule: &ContentRule, size: usize, label: usize, rng: &mut R) -> Option<Vec<Blob>> {
    let margin = rule.blob_radius.1;
    let lo = margin;
    let hi = size as f32 - margin;
    let count = rng.random_range(rule.blobs_min..=rule.blobs_max);
    let mut blobs = Vec::with_capacity(count);
    if label == 1 {
        // A tight cluster around one center, then scattered extras.
        let spread = rule.cluster_radius / 2.0 - 0.5;
        let cx = rng.random_range(lo + spread..hi - spread);
        let cy = rng.random_range(lo + spread..hi - spread);
        let members = rule.cluster_min.max(count.min(rule.cluster_min + 1));
        for _ in 0..members {
            let a = rng.random_range(0.0..std::f32::consts::TAU);
            let d = rng.random_range(0.0..spread);
            blobs.push(random_blob(rule, cx + d * a.cos(), cy + d * a.sin(), rng));
        }
    }
    let mut tries = 0;
    while blobs.len() < count {
        tries += 1;
        if tries > PLACEMENT_TRIES {
            return None;
        }
        let (x, y) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let far = blobs
            .iter()
            .all(|b| ((b.x - x).powi(2) + (b.y - y).powi(2)).sqrt() >= rule.min_separation);
        if far {
            blobs.push(random_blob(rule, x, y, rng));
        }
    }
    (rule.label(&blobs) == label).then_some(blobs)
}

fn rasterize(rule: &ContentRule, size: usize, blobs: &[Blob]) -> Vec<f32> {
    let mut gray = vec![rule.background; size * size];
    for b in blobs {
        let (s, c) = b.angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - b.x, y as f32 + 0.5 - b.y);
                let u = (c * dx + s * dy) / b.rx;
                let v = (-s * dx + c * dy) / b.ry;
                gray[y * size + x] += b.intensity * (-(u * u + v * v)).exp();
            }
        }
    }
    for g in &mut gray {
        *g = g.min(1.0);
    }
    gray
}

/// Draws a content canvas with the requested label.
pub fn draw_canvas<R: Rng + ?Sized>(rule: &ContentRule, size: usize, label: usize, rng: &mut R) -> Result<Canvas> {
    for _ in 0..PLACEMENT_TRIES {
        if let Some(blobs) = layout(rule, size, label, rng) {
            return Ok(Canvas {
                size,
                gray: rasterize(rule, size, &blobs),
                blobs,
                label,
            });
        }
    }
    Err(Error::Data(format!(
        "could not place a label-{label} blob layout on a {size}x{size} canvas"
    )))
}

/// Zero-mean, unit-std field whose amplitude spectrum falls off as `f^-tilt`.
pub fn texture_field<R: Rng + ?Sized>(size: usize, tilt: f32, rng: &mut R) -> Vec<f32> {
    let mut plane: Vec<Complex64> = (0..size * size)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    fft2_in_place(&mut plane, size, size, Direction::Forward);
    for y in 0..size {
        for x in 0..size {
            let fy = y.min(size - y) as f64;
            let fx = x.min(size - x) as f64;
            let f = (fx * fx + fy * fy).sqrt();
            let gain = if f == 0.0 { 0.0 } else { f.powf(-tilt as f64) };
            plane[y * size + x] *= gain;
        }
    }
    fft2_in_place(&mut plane, size, size, Direction::Inverse);
    let vals: Vec<f64> = plane.iter().map(|c| c.re).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let std = var.sqrt().max(1e-12);
    vals.iter().map(|v| ((v - mean) / std) as f32).collect()
}

/// Applies a domain style to a content canvas.
pub fn render<R: Rng + ?Sized>(canvas: &Canvas, spec: &DomainSpec, rng: &mut R) -> Image {
    let n = canvas.size;
    let textures: Vec<Vec<f32>> = (0..3).map(|_| texture_field(n, spec.spectral_tilt, rng)).collect();
    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0)).expect("non-negative std");
    let mut data = Vec::with_capacity(n * n * 3);
    for i in 0..n * n {
        let base: [f32; 3] = std::array::from_fn(|c| canvas.gray[i] + spec.texture_std * textures[c][i]);
        for c in 0..3 {
            let row = spec.color_affine[c];
            let v = row[0] * base[0] + row[1] * base[1] + row[2] * base[2] + spec.color_bias[c];
            let v = if spec.noise_std > 0.0 { v + noise.sample(rng) } else { v };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(n, n, 3, data).expect("square RGB canvas")
}

/// Which split a sample belongs to. Each split draws from its own ChaCha
/// stream, so splits never share samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// `count` samples of one split, alternating labels then shuffled.
pub fn gen_domain(spec: &DomainSpec, rule: &ContentRule, size: usize, split: Split, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if !is_power_of_two(size) {
        return Err(Error::Config(format!("image size {size} must be a power of two")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream_id());
    let mut labels: Vec<usize> = (0..count).map(|i| i % 2).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let mut data = Dataset::default();
    for label in labels {
        let canvas = draw_canvas(rule, size, label, &mut rng)?;
        let image = render(&canvas, spec, &mut rng);
        data.push(image, canvas.label);
    }
    let frac = data.positive_fraction();
    let positives = data.labels.iter().filter(|&&l| l == 1).count();
    if count >= 2 && (2 * positives).abs_diff(count) > 1 && !(0.4..=0.6).contains(&frac) {
        return Err(Error::Data(format!("label balance {frac:.2} outside [0.4, 0.6]")));
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticStreamConfig {
    pub num_train_domains: usize,
    pub num_heldout: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub pretrain_samples: usize,
    pub image_size: usize,
    pub rule: ContentRule,
}

impl Default for SyntheticStreamConfig {
    fn default() -> Self {
        Self {
            num_train_domains: 4,
            num_heldout: 1,
            train_samples: 512,
            val_samples: 128,
            test_samples: 256,
            pretrain_samples: 1024,
            image_size: 32,
            rule: ContentRule::default(),
        }
    }
}

impl SyntheticStreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_train_domains == 0 {
            return Err(Error::Config("need at least one training domain".into()));
        }
        if !is_power_of_two(self.image_size) {
            return Err(Error::Config(format!("image_size {} must be a power of two", self.image_size)));
        }
        let r = &self.rule;
        if r.blobs_min == 0 || r.blobs_min > r.blobs_max || r.cluster_min > r.blobs_max {
            return Err(Error::Config("inconsistent blob counts".into()));
        }
        if r.min_separation <= r.cluster_radius {
            return Err(Error::Config("min_separation must exceed cluster_radius".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Style {
    affine: [[f32; 3]; 3],
    bias: [f32; 3],
    tilt: f32,
    texture: f32,
    noise: f32,
}

/// Training-domain styles, increasingly far from the first.
const STYLE_TABLE: [Style; 4] = [
    Style {
        affine: [[0.75, 0.05, 0.0], [0.0, 0.55, 0.05], [0.05, 0.0, 0.70]],
        bias: [0.15, 0.05, 0.20],
        tilt: 1.0,
        texture: 0.04,
        noise: 0.02,
    },
    Style {
        affine: [[0.40, 0.10, 0.0], [0.0, 0.70, 0.10], [0.10, 0.0, 0.45]],
        bias: [0.45, 0.15, 0.30],
        tilt: 1.6,
        texture: 0.07,
        noise: 0.03,
    },
    Style {
        affine: [[0.30, 0.0, 0.15], [0.10, 0.35, 0.0], [0.0, 0.15, 0.85]],
        bias: [0.05, 0.50, 0.10],
        tilt: 2.2,
        texture: 0.10,
        noise: 0.04,
    },
    Style {
        affine: [[0.55, 0.15, 0.15], [0.15, 0.30, 0.15], [0.15, 0.15, 0.25]],
        bias: [0.35, 0.45, 0.55],
        tilt: 0.3,
        texture: 0.13,
        noise: 0.05,
    },
];

fn lerp_style(a: &Style, b: &Style, w: f32) -> Style {
    let mix = |x: f32, y: f32| (1.0 - w) * x + w * y;
    Style {
        affine: std::array::from_fn(|r| std::array::from_fn(|c| mix(a.affine[r][c], b.affine[r][c]))),
        bias: std::array::from_fn(|c| mix(a.bias[c], b.bias[c])),
        tilt: mix(a.tilt, b.tilt),
        texture: mix(a.texture, b.texture),
        noise: mix(a.noise, b.noise),
    }
}

fn spec_from(style: &Style, seed: u64) -> DomainSpec {
    DomainSpec {
        color_affine: style.affine,
        color_bias: style.bias,
        spectral_tilt: style.tilt,
        texture_std: style.texture,
        noise_std: style.noise,
        seed,
    }
}

fn domain_seed(master: u64, index: usize) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Training-domain specs followed by held-out specs. Training domain `i`
/// uses style `i` of the table (cycling with a small perturbation past the
/// table end); held-out domain `h` blends styles `h` and `h + 1` equally, so
/// it lies between two trained styles.
pub fn domain_specs(cfg: &SyntheticStreamConfig, master_seed: u64) -> Vec<DomainSpec> {
    let n = STYLE_TABLE.len();
    let mut specs = Vec::with_capacity(cfg.num_train_domains + cfg.num_heldout);
    for i in 0..cfg.num_train_domains {
        let style = if i < n {
            STYLE_TABLE[i]
        } else {
            lerp_style(&STYLE_TABLE[i % n], &STYLE_TABLE[(i + 1) % n], 0.25)
        };
        specs.push(spec_from(&style, domain_seed(master_seed, i)));
    }
    for h in 0..cfg.num_heldout {
        let style = lerp_style(&STYLE_TABLE[h % n], &STYLE_TABLE[(h + 1) % n], 0.5);
        specs.push(spec_from(&style, domain_seed(master_seed, cfg.num_train_domains + h)));
    }
    specs
}

/// Neutral gray style used to pretrain the backbone.
pub fn pretrain_spec(master_seed: u64) -> DomainSpec {
    DomainSpec {
        color_affine: [[0.7, 0.0, 0.0], [0.0, 0.7, 0.0], [0.0, 0.0, 0.7]],
        color_bias: [0.15, 0.15, 0.15],
        spectral_tilt: 1.0,
        texture_std: 0.05,
        noise_std: 0.02,
        seed: domain_seed(master_seed, usize::MAX - 1),
    }
}

pub fn pretrain_dataset(cfg: &SyntheticStreamConfig, master_seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    gen_domain(
        &pretrain_spec(master_seed),
        &cfg.rule,
        cfg.image_size,
        Split::Train,
        cfg.pretrain_samples,
    )
}

fn splits_for(cfg: &SyntheticStreamConfig, spec: &DomainSpec, name: String) -> Result<DomainSplits> {
    Ok(DomainSplits {
        name,
        train: gen_domain(spec, &cfg.rule, cfg.image_size, Split::Train, cfg.train_samples)?,
        val: gen_domain(spec, &cfg.rule, cfg.image_size, Split::Val, cfg.val_samples)?,
        test: gen_domain(spec, &cfg.rule, cfg.image_size, Split::Test, cfg.test_samples)?,
    })
}

/// The full synthetic stream for one master seed.
pub fn make_stream(cfg: &SyntheticStreamConfig, master_seed: u64) -> Result<DomainStream> {
    cfg.validate()?;
    let specs = domain_specs(cfg, master_seed);
    let (train_specs, heldout_specs) = specs.split_at(cfg.num_train_domains);
    let domains = train_specs
        .iter()
        .enumerate()
        .map(|(i, s)| splits_for(cfg, s, format!("D{}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let heldout = heldout_specs
        .iter()
        .enumerate()
        .map(|(h, s)| splits_for(cfg, s, format!("H{}", h + 1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainStream::new(domains, heldout))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canvases_follow_the_rule() {
        let rule = ContentRule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..200 {
            let c = draw_canvas(&rule, 32, i % 2, &mut rng).unwrap();
            assert_eq!(rule.label(&c.blobs), i % 2);
            assert!(c.gray.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn texture_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = texture_field(16, 1.5, &mut rng);
        let mean: f32 = t.iter().sum::<f32>() / t.len() as f32;
        let var: f32 = t.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / t.len() as f32;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn domains_are_balanced_and_deterministic() {
        let cfg = SyntheticStreamConfig::default();
        let spec = &domain_specs(&cfg, 7)[0];
        let a = gen_domain(spec, &cfg.rule, 32, Split::Test, 40).unwrap();
        let b = gen_domain(spec, &cfg.rule, 32, Split::Test, 40).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positive_fraction(), 0.5);
        let c = gen_domain(spec, &cfg.rule, 32, Split::Train, 40).unwrap();
        assert_ne!(a.images[0], c.images[0]);
    }

    #[test]
    fn default_stream_shape() {
        let cfg = SyntheticStreamConfig {
            train_samples: 4,
            val_samples: 2,
            test_samples: 2,
            ..Default::default()
        };
        let s = make_stream(&cfg, 0).unwrap();
        assert_eq!(s.num_domains(), 5);
        assert_eq!(s.num_train_domains(), 4);
    }
}
