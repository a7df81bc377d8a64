//! Procedural multi-class phantoms rendered under different intensity
//! mappings, giving multi-modal registration problems with known answers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{dice, BinaryMask};
use crate::image::{gaussian_blur, warp, DeformationField, ImageGrid};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::transforms::{sample_deformation, DeformationConfig, GAUSSIAN_TRUNCATE};

pub const MIN_PHANTOM_SIZE: usize = 32;
pub const MAX_CLASSES: usize = 8;
/// Misalignment required of a deformed pair: largest-structure Dice below this.
pub const MISALIGNMENT_DICE: f64 = 0.9;
const MAX_PAIR_RETRIES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T> {
    /// Rendering with ascending class intensities and no texture.
    pub image: ImageGrid<T>,
    /// Class label per pixel; 0 is the background outside the body.
    pub class_map: Vec<u8>,
    pub classes: usize,
    /// One mask per non-background class, named `structure_<k>`.
    pub masks: Vec<(String, BinaryMask)>,
}

impl<T: Scalar> Phantom<T> {
    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }

    /// Index into `masks` of the structure with the most pixels.
    pub fn largest_structure(&self) -> usize {
        largest(&self.masks)
    }
}

fn largest(masks: &[(String, BinaryMask)]) -> usize {
    let mut best = 0;
    for (i, (_, m)) in masks.iter().enumerate() {
        if m.count() > masks[best].1.count() {
            best = i;
        }
    }
    best
}

fn smooth_noise(stream: &mut SeedStream, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| stream.uniform(-1.0, 1.0)).collect();
    gaussian_blur(&raw, h, w, sigma, GAUSSIAN_TRUNCATE)
}

fn class_masks(class_map: &[u8], h: usize, w: usize, classes: usize) -> Vec<(String, BinaryMask)> {
    (1..classes)
        .map(|k| {
            let values = class_map.iter().map(|&c| c as usize == k).collect();
            (format!("structure_{k}"), BinaryMask::new(h, w, values).expect("sized"))
        })
        .collect()
}

/// Draws an elliptical body with a wobbly outline, partitioned into
/// `classes - 1` blobby interior structures of equal area by quantiles of a
/// smoothed noise field.
pub fn generate_phantom<T: Scalar>(stream: &mut SeedStream, size: usize, classes: usize) -> Result<Phantom<T>> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::TooSmall {
            height: size,
            width: size,
        });
    }
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::BadConfig(format!("class count must be in 2..={MAX_CLASSES}")));
    }
    let n = size as f64;
    let c = (n - 1.0) / 2.0;
    let center = (c + stream.uniform::<f64>(-0.04, 0.04) * n, c + stream.uniform::<f64>(-0.04, 0.04) * n);
    let radii = (stream.uniform::<f64>(0.34, 0.42) * n, stream.uniform::<f64>(0.34, 0.42) * n);
    let outline = smooth_noise(stream, size, size, n / 10.0);
    let outline_scale = outline.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let inner = smooth_noise(stream, size, size, n / 12.0);

    let mut body = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = ((y as f64 - center.0) / radii.0, (x as f64 - center.1) / radii.1);
            let wobble = 0.12 * outline[y * size + x] / outline_scale;
            body.push((dy * dy + dx * dx).sqrt() < 1.0 + wobble);
        }
    }
    let mut inside: Vec<f64> = inner.iter().zip(&body).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
    inside.sort_by(f64::total_cmp);
    let structures = classes - 1;
    let thresholds: Vec<f64> = (1..structures).map(|i| inside[i * inside.len() / structures]).collect();
    let class_map: Vec<u8> = inner
        .iter()
        .zip(&body)
        .map(|(&v, &b)| {
            if b {
                (1 + thresholds.iter().filter(|&&t| v >= t).count()) as u8
            } else {
                0
            }
        })
        .collect();
    let masks = class_masks(&class_map, size, size, classes);
    if masks.iter().any(|(_, m)| m.is_empty()) || !class_map.contains(&0) {
        return Err(Error::InvalidSpec("phantom generation produced an empty class".into()));
    }
    let map = ModalityMap::ascending(classes);
    let image = render(&class_map, size, size, &map, &mut SeedStream::new(0))?;
    Ok(Phantom {
        image,
        class_map,
        classes,
        masks,
    })
}

/// How one simulated modality renders each class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityMap {
    /// Base intensity per class, in [-1, 1].
    pub levels: Vec<f64>,
    /// Amplitude of uniform per-pixel texture noise.
    pub jitter: f64,
    /// Exponent of the global nonlinearity `v -> 2 ((v + 1) / 2)^gamma - 1`.
    pub gamma: f64,
    /// Width of the Gaussian partial-volume blur across class boundaries.
    pub edge_sigma: f64,
}

impl ModalityMap {
    /// Evenly spaced increasing levels from -1 to 1, no texture or blur.
    pub fn ascending(classes: usize) -> Self {
        let levels = (0..classes)
            .map(|k| -1.0 + 2.0 * k as f64 / (classes - 1).max(1) as f64)
            .collect();
        Self {
            levels,
            jitter: 0.0,
            gamma: 1.0,
            edge_sigma: 0.0,
        }
    }

    /// Default source modality: dark background, brightening structures.
    pub fn modality_a(classes: usize) -> Self {
        let inner = classes - 1;
        let mut levels = vec![-0.9];
        levels.extend((0..inner).map(|i| -0.3 + 1.1 * (i as f64 + 1.0) / inner as f64));
        Self {
            levels,
            jitter: 0.03,
            gamma: 1.0,
            edge_sigma: 0.7,
        }
    }

    /// Second modality: the structure levels of [`ModalityMap::modality_a`]
    /// in reverse order, then a gamma curve.
    pub fn modality_b(classes: usize) -> Self {
        let a = Self::modality_a(classes);
        let mut levels = vec![-1.0];
        levels.extend(a.levels[1..].iter().rev());
        Self {
            levels,
            jitter: 0.03,
            gamma: 1.8,
            edge_sigma: 0.7,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.levels.len() != classes {
            return Err(Error::BadConfig(format!(
                "modality has {} levels for {classes} classes",
                self.levels.len()
            )));
        }
        if self.levels.iter().any(|l| !(-1.0..=1.0).contains(l))
            || !(self.jitter >= 0.0)
            || !(self.gamma > 0.0)
            || !(self.edge_sigma >= 0.0)
        {
            return Err(Error::BadConfig("modality parameters out of range".into()));
        }
        Ok(())
    }
}

fn render<T: Scalar>(
    class_map: &[u8],
    h: usize,
    w: usize,
    map: &ModalityMap,
    stream: &mut SeedStream,
) -> Result<ImageGrid<T>> {
    let mut v: Vec<f64> = class_map.iter().map(|&c| map.levels[c as usize]).collect();
    if map.edge_sigma > 0.0 {
        v = gaussian_blur(&v, h, w, map.edge_sigma, GAUSSIAN_TRUNCATE);
    }
    if map.jitter > 0.0 {
        for x in v.iter_mut() {
            *x += stream.uniform::<f64>(-map.jitter, map.jitter);
        }
    }
    if map.gamma != 1.0 {
        for x in v.iter_mut() {
            *x = 2.0 * ((x.clamp(-1.0, 1.0) + 1.0) / 2.0).powf(map.gamma) - 1.0;
        }
    }
    ImageGrid::from_clamped(h, w, v.into_iter().map(T::lit).collect())
}

pub fn simulate_modality<T: Scalar>(
    phantom: &Phantom<T>,
    map: &ModalityMap,
    stream: &mut SeedStream,
) -> Result<ImageGrid<T>> {
    map.validate(phantom.classes)?;
    let (h, w) = phantom.shape();
    render(&phantom.class_map, h, w, map, stream)
}

#[derive(Debug, Clone)]
pub struct GroundTruthPair<T> {
    pub moving: ImageGrid<T>,
    pub target: ImageGrid<T>,
    pub masks_moving: Vec<(String, BinaryMask)>,
    pub masks_target: Vec<(String, BinaryMask)>,
    /// Field that deformed the moving image away from the target.
    pub true_field: DeformationField<T>,
}

impl<T: Scalar> GroundTruthPair<T> {
    pub fn largest_structure(&self) -> usize {
        largest(&self.masks_target)
    }

    /// Mean Dice over all structures after warping the moving masks by `field`.
    pub fn mean_dice(&self, field: &DeformationField<T>) -> Result<f64> {
        let mut total = 0.0;
        for ((_, m), (_, t)) in self.masks_moving.iter().zip(&self.masks_target) {
            total += dice(&m.warp_nearest(field)?, t)?;
        }
        Ok(total / self.masks_target.len() as f64)
    }
}

/// Target is modality A of the phantom; moving is modality B warped by a
/// sampled field. With a nonzero deformation the field is resampled until
/// the largest structure is visibly misaligned (bounded retries).
pub fn generate_ground_truth_pair<T: Scalar>(
    phantom: &Phantom<T>,
    modalities: (&ModalityMap, &ModalityMap),
    deformation: &DeformationConfig,
    stream: &mut SeedStream,
) -> Result<GroundTruthPair<T>> {
    deformation.validate()?;
    let target = simulate_modality(phantom, modalities.0, &mut stream.fork())?;
    let moving_base = simulate_modality(phantom, modalities.1, &mut stream.fork())?;
    let (h, w) = phantom.shape();
    let big = phantom.largest_structure();
    let deforms = deformation.deformation_strength > 0.0;
    let mut field_stream = stream.fork();
    let mut attempt = 0;
    loop {
        let field: DeformationField<T> = sample_deformation(&mut field_stream, deformation, h, w)?;
        let masks_moving = phantom
            .masks
            .iter()
            .map(|(name, m)| Ok((name.clone(), m.warp_nearest(&field)?)))
            .collect::<Result<Vec<_>>>()?;
        attempt += 1;
        let misaligned = dice(&masks_moving[big].1, &phantom.masks[big].1)? < MISALIGNMENT_DICE;
        if !deforms || misaligned || attempt >= MAX_PAIR_RETRIES {
            return Ok(GroundTruthPair {
                moving: warp(&moving_base, &field)?,
                target,
                masks_moving,
                masks_target: phantom.masks.clone(),
                true_field: field,
            });
        }
    }
}

/// Fixed-point approximation of the field `g` with
/// `g(p) + f(p + g(p)) = 0`, i.e. the correction that undoes a pull warp by `f`.
pub fn invert_field<T: Scalar>(field: &DeformationField<T>, iterations: usize) -> DeformationField<T> {
    let (h, w) = field.shape();
    let dy: Vec<T> = (0..h * w).map(|i| field.as_slice()[2 * i]).collect();
    let dx: Vec<T> = (0..h * w).map(|i| field.as_slice()[2 * i + 1]).collect();
    let mut g = DeformationField::zeros(h, w);
    for _ in 0..iterations {
        g = DeformationField::from_fn(h, w, |y, x| {
            let (gy, gx) = g.get(y, x);
            let sy = T::from_usize_lossy(y) + gy;
            let sx = T::from_usize_lossy(x) + gx;
            (
                -crate::image::sample_bilinear(&dy, h, w, sy, sx),
                -crate::image::sample_bilinear(&dx, h, w, sy, sx),
            )
        });
    }
    g
}
