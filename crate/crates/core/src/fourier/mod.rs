//! Amplitude/phase analysis of images and Fourier style augmentation.
//!
//! Spectra are unshifted (DC at index 0) and unnormalized on the forward
//! side, so the DC amplitude equals the pixel sum of a channel. Channels are
//! transformed independently.

mod fft;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::raster::Image;
pub use fft::{fft2_in_place, fft_in_place, is_power_of_two, Direction};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FourierError {
    #[error("image dims {height}x{width} are not powers of two")]
    NotPowerOfTwo { height: usize, width: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{keys} keys but {weights} weights")]
    WeightCount { keys: usize, weights: usize },
    #[error("mixing weights must be non-negative and sum to 1, got sum {sum}")]
    InvalidWeights { sum: f64 },
    #[error("cosine similarity of a zero-norm amplitude")]
    ZeroNorm,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("amplitude must be non-negative")]
    NegativeAmplitude,
}

type Result<T> = std::result::Result<T, FourierError>;

/// Per-channel `H × W` planes stored channel-major (CHW).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planes {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Option<Self> {
        (channels * height * width == data.len()).then_some(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width]).unwrap()
    }

    /// `(height, width, channels)`, matching [`Image::dims`].
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Amplitude (modulus) and phase (argument, in `(-π, π]`) of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub amplitude: Planes,
    pub phase: Planes,
}

/// Dataset-averaged amplitude used as a domain signature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeKey {
    pub amplitude: Planes,
    pub domain_index: usize,
}

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if is_power_of_two(h) && is_power_of_two(w) {
        Ok(())
    } else {
        Err(FourierError::NotPowerOfTwo { height: h, width: w })
    }
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        p
    }
}

/// Forward 2D FFT of every channel.
pub fn fft2(image: &Image) -> Result<Spectrum> {
    let (h, w, c) = image.dims();
    check_pow2(h, w)?;
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(FourierError::NonFinite("image"));
    }
    let mut amp = Vec::with_capacity(c * h * w);
    let mut phase = Vec::with_capacity(c * h * w);
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for (b, v) in buf.iter_mut().zip(image.data().iter().skip(ch).step_by(c)) {
            *b = Complex64::new(*v as f64, 0.0);
        }
        fft2_in_place(&mut buf, h, w, Direction::Forward);
        for z in &buf {
            amp.push(z.norm() as f32);
            phase.push(wrap_phase(z.arg()) as f32);
        }
    }
    Ok(Spectrum {
        amplitude: Planes::new(c, h, w, amp).unwrap(),
        phase: Planes::new(c, h, w, phase).unwrap(),
    })
}

/// Amplitude spectrum only.
pub fn amplitude(image: &Image) -> Result<Planes> {
    Ok(fft2(image)?.amplitude)
}

/// Inverse transform of `amplitude · e^{i·phase}` without clamping; the
/// imaginary residue is dropped.
pub fn ifft2_unclamped(spectrum: &Spectrum) -> Result<Image> {
    let (h, w, c) = spectrum.amplitude.dims();
    if spectrum.phase.dims() != (h, w, c) {
        return Err(FourierError::ShapeMismatch {
            expected: (h, w, c),
            actual: spectrum.phase.dims(),
        });
    }
    check_pow2(h, w)?;
    if spectrum.amplitude.data().iter().any(|&a| a < 0.0) {
        return Err(FourierError::NegativeAmplitude);
    }
    let mut planes = Vec::with_capacity(c);
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for ((b, &a), &p) in buf
            .iter_mut()
            .zip(spectrum.amplitude.plane(ch))
            .zip(spectrum.phase.plane(ch))
        {
            *b = Complex64::from_polar(a as f64, p as f64);
        }
        fft2_in_place(&mut buf, h, w, Direction::Inverse);
        planes.push(buf.iter().map(|z| z.re as f32).collect::<Vec<_>>());
    }
    Ok(Image::from_channels(h, w, &planes).expect("plane sizes match"))
}

/// Inverse transform clamped to the valid pixel range `[0, 1]`.
pub fn ifft2(spectrum: &Spectrum) -> Result<Image> {
    let mut img = ifft2_unclamped(spectrum)?;
    img.clamp_unit();
    Ok(img)
}

/// Elementwise mean amplitude over a set of same-shaped images.
pub fn average_amplitude(images: &[Image], domain_index: usize) -> Result<AmplitudeKey> {
    let first = images.first().ok_or(FourierError::Empty("dataset"))?;
    let dims = first.dims();
    let mut acc = vec![0.0f64; dims.0 * dims.1 * dims.2];
    for img in images {
        if img.dims() != dims {
            return Err(FourierError::ShapeMismatch {
                expected: dims,
                actual: img.dims(),
            });
        }
        for (a, v) in acc.iter_mut().zip(amplitude(img)?.data()) {
            *a += *v as f64;
        }
    }
    let n = images.len() as f64;
    let (h, w, c) = dims;
    Ok(AmplitudeKey {
        amplitude: Planes::new(c, h, w, acc.into_iter().map(|v| (v / n) as f32).collect()).unwrap(),
        domain_index,
    })
}

/// Convex combination `Σ λ_j k_j` of amplitude planes.
pub fn mix_amplitudes(keys: &[&Planes], weights: &[f32]) -> Result<Planes> {
    let first = keys.first().ok_or(FourierError::Empty("key list"))?;
    if keys.len() != weights.len() {
        return Err(FourierError::WeightCount {
            keys: keys.len(),
            weights: weights.len(),
        });
    }
    let sum: f64 = weights.iter().map(|&w| w as f64).sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() >= 1e-6 {
        return Err(FourierError::InvalidWeights { sum });
    }
    for k in keys {
        if k.dims() != first.dims() {
            return Err(FourierError::ShapeMismatch {
                expected: first.dims(),
                actual: k.dims(),
            });
        }
    }
    let mut acc = vec![0.0f64; first.data().len()];
    for (k, &lambda) in keys.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(k.data()) {
            *a += lambda as f64 * v as f64;
        }
    }
    let (h, w, c) = first.dims();
    Ok(Planes::new(c, h, w, acc.into_iter().map(|v| v as f32).collect()).unwrap())
}

/// Uniform draw from the `(t-1)`-simplex, i.e. Dirichlet(1, …, 1).
pub fn sample_simplex<R: Rng + ?Sized>(t: usize, rng: &mut R) -> Vec<f32> {
    assert!(t >= 1, "simplex needs at least one vertex");
    if t == 1 {
        return vec![1.0];
    }
    let draws: Vec<f64> = (0..t).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let mut lambda: Vec<f32> = draws.iter().map(|d| (d / total) as f32).collect();
    // Absorb f32 rounding into the largest weight so the sum is 1 to f32 precision.
    let residual = 1.0 - lambda.iter().map(|&l| l as f64).sum::<f64>();
    let (imax, _) = lambda
        .iter()
        .enumerate()
        .fold((0, f32::MIN), |best, (i, &l)| if l > best.1 { (i, l) } else { best });
    lambda[imax] = (lambda[imax] as f64 + residual).max(0.0) as f32;
    lambda
}

/// Re-synthesizes `image` from its own phase and a random convex mixture of
/// `keys`. Returns the augmented image and the mixing weights.
pub fn style_augment<R: Rng + ?Sized>(
    image: &Image,
    keys: &[&Planes],
    rng: &mut R,
) -> Result<(Image, Vec<f32>)> {
    if keys.is_empty() {
        return Err(FourierError::Empty("key list"));
    }
    let lambda = sample_simplex(keys.len(), rng);
    let out = style_augment_with(image, keys, &lambda)?;
    Ok((out, lambda))
}

/// [`style_augment`] with caller-chosen weights.
pub fn style_augment_with(image: &Image, keys: &[&Planes], lambda: &[f32]) -> Result<Image> {
    let spectrum = fft2(image)?;
    let mixed = mix_amplitudes(keys, lambda)?;
    if mixed.dims() != spectrum.phase.dims() {
        return Err(FourierError::ShapeMismatch {
            expected: spectrum.phase.dims(),
            actual: mixed.dims(),
        });
    }
    ifft2(&Spectrum {
        amplitude: mixed,
        phase: spectrum.phase,
    })
}

/// Cosine similarity of two flattened amplitude arrays.
pub fn amplitude_cosine(a: &Planes, k: &Planes) -> Result<f32> {
    if a.dims() != k.dims() {
        return Err(FourierError::ShapeMismatch {
            expected: k.dims(),
            actual: a.dims(),
        });
    }
    let (mut dot, mut na, mut nk) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(k.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nk += y * y;
    }
    if na == 0.0 || nk == 0.0 {
        return Err(FourierError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nk.sqrt())) as f32)
}
