//! Random spatial transformations and synthesis of self-supervised training
//! pairs whose error label is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, warp, DeformationField, ErrorMap, ImageGrid};
use crate::remap::{apply_remap, bezier_shift, sample_remap, DEFAULT_N_MAX, DEFAULT_N_MIN};
use crate::rng::SeedStream;
use crate::scalar::Scalar;

/// Image size the elastic magnitude is expressed against.
pub const ELASTIC_REFERENCE_SIZE: f64 = 128.0;
/// Gaussian kernels are truncated at this many standard deviations.
pub const GAUSSIAN_TRUNCATE: f64 = 3.0;

/// Global affine transform, applied about the image centre.
///
/// The displacement it induces is `c + scale * R(rotation) (p - c) + t - p`,
/// i.e. output pixel `p` samples the source at the transformed position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Degrees.
    pub rotation: f64,
    /// `(fraction of height, fraction of width)`.
    pub translation: (f64, f64),
    pub scale: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            translation: (0.0, 0.0),
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRanges {
    pub rotation: [f64; 2],
    pub translation: [f64; 2],
    pub scale: [f64; 2],
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            rotation: [-3.0, 3.0],
            translation: [-0.08, 0.08],
            scale: [0.92, 1.08],
        }
    }
}

fn ordered(name: &'static str, r: [f64; 2]) -> Result<()> {
    if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
        return Err(Error::BadRange {
            name,
            lo: r[0],
            hi: r[1],
        });
    }
    Ok(())
}

pub fn sample_affine(stream: &mut SeedStream, ranges: &AffineRanges) -> Result<AffineParams> {
    ordered("rotation_range", ranges.rotation)?;
    ordered("translation_range", ranges.translation)?;
    ordered("scale_range", ranges.scale)?;
    let rotation = stream.uniform(ranges.rotation[0], ranges.rotation[1]);
    let ty = stream.uniform(ranges.translation[0], ranges.translation[1]);
    let tx = stream.uniform(ranges.translation[0], ranges.translation[1]);
    let scale = stream.uniform(ranges.scale[0], ranges.scale[1]);
    Ok(AffineParams {
        rotation,
        translation: (ty, tx),
        scale,
    })
}

pub fn affine_to_field<T: Scalar>(params: &AffineParams, height: usize, width: usize) -> DeformationField<T> {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let (sin, cos) = params.rotation.to_radians().sin_cos();
    let ty = params.translation.0 * height as f64;
    let tx = params.translation.1 * width as f64;
    DeformationField::from_fn(height, width, |y, x| {
        let (ry, rx) = (y as f64 - cy, x as f64 - cx);
        let sy = cy + params.scale * (cos * ry + sin * rx) + ty;
        let sx = cx + params.scale * (-sin * ry + cos * rx) + tx;
        (T::lit(sy - y as f64), T::lit(sx - x as f64))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    /// Peak displacement magnitude in pixels for a 128-pixel image.
    pub alpha: f64,
    /// Gaussian smoothing radius in pixels.
    pub sigma: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self {
            alpha: 80.0,
            sigma: 12.0,
        }
    }
}

/// Smooth random displacement field whose peak magnitude is
/// `alpha * min(height, width) / 128`.
pub fn sample_elastic_field<T: Scalar>(
    stream: &mut SeedStream,
    params: &ElasticParams,
    height: usize,
    width: usize,
) -> Result<DeformationField<T>> {
    if !(params.alpha >= 0.0) || !(params.sigma > 0.0) {
        return Err(Error::BadConfig(format!(
            "elastic params need alpha >= 0 and sigma > 0, got alpha={} sigma={}",
            params.alpha, params.sigma
        )));
    }
    let n = height * width;
    let mut noise_y = Vec::with_capacity(n);
    let mut noise_x = Vec::with_capacity(n);
    for _ in 0..n {
        noise_y.push(stream.uniform::<f64>(-1.0, 1.0));
        noise_x.push(stream.uniform::<f64>(-1.0, 1.0));
    }
    if params.alpha == 0.0 {
        return Ok(DeformationField::zeros(height, width));
    }
    let sy = gaussian_blur(&noise_y, height, width, params.sigma, GAUSSIAN_TRUNCATE);
    let sx = gaussian_blur(&noise_x, height, width, params.sigma, GAUSSIAN_TRUNCATE);
    let peak = sy
        .iter()
        .zip(&sx)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0f64, f64::max);
    if peak == 0.0 {
        return Ok(DeformationField::zeros(height, width));
    }
    let target = params.alpha * height.min(width) as f64 / ELASTIC_REFERENCE_SIZE;
    let k = target / peak;
    Ok(DeformationField::from_fn(height, width, |y, x| {
        let i = y * width + x;
        (T::lit(sy[i] * k), T::lit(sx[i] * k))
    }))
}

/// Affine + elastic deformation ranges with a single strength multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationConfig {
    pub rotation_range: [f64; 2],
    pub translation_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub deformation_strength: f64,
}

/// Peak elastic displacement (pixels at 128 px) used by default for pair
/// synthesis. A unit-amplitude uniform field smoothed with sigma 12 and
/// multiplied by 80 peaks at roughly this many pixels.
pub const DEFAULT_ELASTIC_PEAK: f64 = 5.0;

impl Default for DeformationConfig {
    fn default() -> Self {
        let r = AffineRanges::default();
        Self {
            rotation_range: r.rotation,
            translation_range: r.translation,
            scale_range: r.scale,
            elastic_alpha: DEFAULT_ELASTIC_PEAK,
            elastic_sigma: ElasticParams::default().sigma,
            deformation_strength: 1.0,
        }
    }
}

impl DeformationConfig {
    pub fn none() -> Self {
        Self {
            deformation_strength: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ordered("rotation_range", self.rotation_range)?;
        ordered("translation_range", self.translation_range)?;
        ordered("scale_range", self.scale_range)?;
        if !(self.deformation_strength >= 0.0) {
            return Err(Error::BadConfig("deformation_strength must be >= 0".into()));
        }
        if !(self.elastic_alpha >= 0.0) || !(self.elastic_sigma > 0.0) {
            return Err(Error::BadConfig("elastic_alpha must be >= 0 and elastic_sigma > 0".into()));
        }
        Ok(())
    }

    /// Affine ranges after applying the strength multiplier.
    pub fn affine_ranges(&self) -> AffineRanges {
        let s = self.deformation_strength;
        let scale_about_one = |v: f64| 1.0 + s * (v - 1.0);
        AffineRanges {
            rotation: [self.rotation_range[0] * s, self.rotation_range[1] * s],
            translation: [self.translation_range[0] * s, self.translation_range[1] * s],
            scale: [scale_about_one(self.scale_range[0]), scale_about_one(self.scale_range[1])],
        }
    }

    pub fn elastic(&self) -> ElasticParams {
        ElasticParams {
            alpha: self.elastic_alpha * self.deformation_strength,
            sigma: self.elastic_sigma,
        }
    }
}

/// Samples an affine transform followed by an additive elastic perturbation.
pub fn sample_deformation<T: Scalar>(
    stream: &mut SeedStream,
    config: &DeformationConfig,
    height: usize,
    width: usize,
) -> Result<DeformationField<T>> {
    config.validate()?;
    let affine = sample_affine(stream, &config.affine_ranges())?;
    let elastic = sample_elastic_field(stream, &config.elastic(), height, width)?;
    affine_to_field(&affine, height, width).add(&elastic)
}

/// Distribution perturbation applied to the moving image of a training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    ShuffleRemap,
    Bezier,
    None,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle_remap" => Ok(Self::ShuffleRemap),
            "bezier" => Ok(Self::Bezier),
            "none" => Ok(Self::None),
            other => Err(Error::BadConfig(format!("unknown noise mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub rotation_range: [f64; 2],
    pub translation_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub deformation_strength: f64,
    pub noise: NoiseMode,
    pub n_min: usize,
    pub n_max: usize,
    /// Probability that the moving image shares the reference deformation,
    /// giving an all-zero label.
    pub aligned_fraction: f64,
}

/// Default share of already-aligned training pairs.
pub const DEFAULT_ALIGNED_FRACTION: f64 = 0.15;

impl Default for PairConfig {
    fn default() -> Self {
        Self::from_deformation(&DeformationConfig::default(), NoiseMode::ShuffleRemap)
    }
}

impl PairConfig {
    pub fn from_deformation(d: &DeformationConfig, noise: NoiseMode) -> Self {
        Self {
            rotation_range: d.rotation_range,
            translation_range: d.translation_range,
            scale_range: d.scale_range,
            elastic_alpha: d.elastic_alpha,
            elastic_sigma: d.elastic_sigma,
            deformation_strength: d.deformation_strength,
            noise,
            n_min: DEFAULT_N_MIN,
            n_max: DEFAULT_N_MAX,
            aligned_fraction: DEFAULT_ALIGNED_FRACTION,
        }
    }

    pub fn deformation(&self) -> DeformationConfig {
        DeformationConfig {
            rotation_range: self.rotation_range,
            translation_range: self.translation_range,
            scale_range: self.scale_range,
            elastic_alpha: self.elastic_alpha,
            elastic_sigma: self.elastic_sigma,
            deformation_strength: self.deformation_strength,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.deformation().validate()?;
        if !(0.0..=1.0).contains(&self.aligned_fraction) {
            return Err(Error::OutOfRange {
                value: self.aligned_fraction,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if self.noise == NoiseMode::ShuffleRemap && (self.n_min < 1 || self.n_min > self.n_max) {
            return Err(Error::BadRange {
                name: "n_min/n_max",
                lo: self.n_min as f64,
                hi: self.n_max as f64,
            });
        }
        Ok(())
    }
}

/// One self-supervised example: the evaluator sees `(reference, noisy_moving)`
/// and must predict `label = reference - moving`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<T> {
    pub noisy_moving: ImageGrid<T>,
    pub reference: ImageGrid<T>,
    pub label: ErrorMap<T>,
    /// The moving image before the distribution perturbation.
    pub moving: ImageGrid<T>,
}

pub fn make_training_pair<T: Scalar>(
    x: &ImageGrid<T>,
    stream: &mut SeedStream,
    config: &PairConfig,
) -> Result<TrainingSample<T>> {
    config.validate()?;
    let (h, w) = x.shape();
    let deformation = config.deformation();
    let aligned = stream.uniform::<f64>(0.0, 1.0) < config.aligned_fraction;
    let t1 = sample_deformation(&mut stream.fork(), &deformation, h, w)?;
    let t2 = sample_deformation(&mut stream.fork(), &deformation, h, w)?;
    let reference = warp(x, &t2)?;
    let moving = if aligned { reference.clone() } else { warp(x, &t1)? };
    let label = ErrorMap::difference(&reference, &moving)?;
    let mut noise_stream = stream.fork();
    let noisy_moving = match config.noise {
        NoiseMode::ShuffleRemap => {
            let spec = sample_remap(&mut noise_stream, config.n_min, config.n_max)?;
            apply_remap(&moving, &spec)?
        }
        NoiseMode::Bezier => bezier_shift(&moving, &mut noise_stream)?,
        NoiseMode::None => moving.clone(),
    };
    Ok(TrainingSample {
        noisy_moving,
        reference,
        label,
        moving,
    })
}
