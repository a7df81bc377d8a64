//! Registration quality measures and the evaluator-as-assessor experiment.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::EvaluatorModel;
use crate::image::{warp, DeformationField, ImageGrid};
use crate::registration::smoothness_loss;
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::transforms::{sample_deformation, DeformationConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: (height, width),
                actual: (values.len() / width.max(1), width),
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self { height, width, values }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&v| v)
    }

    fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| a || b).collect(),
        })
    }

    /// Pull-warps the mask with nearest-neighbour sampling so it stays binary.
    pub fn warp_nearest<T: Scalar>(&self, field: &DeformationField<T>) -> Result<Self> {
        field.ensure_shape(self.shape())?;
        let (h, w) = self.shape();
        Ok(Self::from_fn(h, w, |y, x| {
            let (dy, dx) = field.get(y, x);
            let sy = (y as f64 + dy.as_f64()).round().clamp(0.0, (h - 1) as f64) as usize;
            let sx = (x as f64 + dx.as_f64()).round().clamp(0.0, (w - 1) as f64) as usize;
            self.get(sy, sx)
        }))
    }

    /// Pixels in the mask with at least one 8-neighbour outside it (the
    /// image exterior counts as outside).
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.shape();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = (-1isize..=1).any(|oy| {
                    (-1isize..=1).any(|ox| {
                        let (ny, nx) = (y as isize + oy, x as isize + ox);
                        ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize || !self.get(ny as usize, nx as usize)
                    })
                });
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (ca, cb) = (a.count(), b.count());
    if ca + cb == 0 {
        return Err(Error::BothEmpty);
    }
    let both = a.values.iter().zip(&b.values).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * both as f64 / (ca + cb) as f64)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn nearest_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// 95th percentile of the pooled boundary-to-boundary nearest distances in
/// both directions, in pixels.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let mut d = nearest_distances(&ba, &bb);
    d.extend(nearest_distances(&bb, &ba));
    Ok(percentile(&mut d, 95.0))
}

/// Mean squared spatial gradient of a field; the same quantity the
/// registration regularizer minimizes.
pub fn field_smoothness<T: Scalar>(field: &DeformationField<T>) -> f64 {
    smoothness_loss(field).as_f64()
}

/// `1 - m / 2` where `m` is the mean `|E(target, moving)|` over the union of
/// the two masks.
pub fn imse_alignment_score<T: Scalar>(
    model: &EvaluatorModel<T>,
    moving: &ImageGrid<T>,
    target: &ImageGrid<T>,
    mask_moving: &BinaryMask,
    mask_target: &BinaryMask,
) -> Result<f64> {
    let region = mask_moving.union(mask_target)?;
    if region.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape(),
            actual: region.shape(),
        });
    }
    let e = model.predict_error_map(target, moving)?;
    alignment_score_from_errors(e.values(), &region)
}

pub fn alignment_score_from_errors<T: Scalar>(errors: &[T], region: &BinaryMask) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (e, &inside) in errors.iter().zip(region.values()) {
        if inside {
            sum += e.as_f64().abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(1.0 - sum / n as f64 / 2.0)
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub score: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub points: Vec<ScorePoint>,
    pub spearman: f64,
    pub pearson: f64,
    pub seed: u64,
    pub transforms: usize,
}

/// A moving/target pair with one structure mask per image.
#[derive(Debug, Clone)]
pub struct MaskedPair<T> {
    pub moving: ImageGrid<T>,
    pub target: ImageGrid<T>,
    pub mask_moving: BinaryMask,
    pub mask_target: BinaryMask,
}

/// Perturbs the moving side of the base pairs with random deformations of
/// random strength (uniform in `[0, deformation.deformation_strength]`) and
/// correlates the alignment score with the resulting Dice.
pub fn correlation_experiment<T: Scalar>(
    model: &EvaluatorModel<T>,
    pairs: &[MaskedPair<T>],
    transforms: usize,
    deformation: &DeformationConfig,
    seed: u64,
) -> Result<CorrelationReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if transforms < 3 {
        return Err(Error::BadConfig("correlation needs at least 3 transforms".into()));
    }
    deformation.validate()?;
    let points = (0..transforms)
        .into_par_iter()
        .map(|t| {
            let pair = &pairs[t % pairs.len()];
            let mut stream = SeedStream::derive(seed, &[t as u64]);
            let strength = stream.uniform::<f64>(0.0, 1.0) * deformation.deformation_strength;
            let cfg = DeformationConfig {
                deformation_strength: strength,
                ..deformation.clone()
            };
            let (h, w) = pair.moving.shape();
            let field = sample_deformation::<T>(&mut stream, &cfg, h, w)?;
            let moving = warp(&pair.moving, &field)?;
            let mask = pair.mask_moving.warp_nearest(&field)?;
            Ok(ScorePoint {
                score: imse_alignment_score(model, &moving, &pair.target, &mask, &pair.mask_target)?,
                dice: dice(&mask, &pair.mask_target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = points.iter().map(|p| p.score).collect();
    let dices: Vec<f64> = points.iter().map(|p| p.dice).collect();
    let (Some(spearman), Some(pearson)) = (spearman(&scores, &dices), pearson(&scores, &dices)) else {
        return Err(Error::DegenerateScores);
    };
    Ok(CorrelationReport {
        points,
        spearman,
        pearson,
        seed,
        transforms,
    })
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("score,dice\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.score, p.dice));
        }
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Scatter plot of score (x) against Dice (y) as an RGB PNG.
    pub fn write_scatter_png(&self, path: &Path) -> Result<()> {
        const SIZE: usize = 400;
        const MARGIN: usize = 30;
        let mut px = vec![255u8; SIZE * SIZE * 3];
        let mut put = |y: usize, x: usize, rgb: [u8; 3]| {
            if y < SIZE && x < SIZE {
                px[(y * SIZE + x) * 3..(y * SIZE + x) * 3 + 3].copy_from_slice(&rgb);
            }
        };
        for i in MARGIN..SIZE - MARGIN / 2 {
            put(SIZE - MARGIN, i, [0, 0, 0]);
            put(SIZE - i, MARGIN, [0, 0, 0]);
        }
        let range = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        let (sx0, sx1) = range(&mut self.points.iter().map(|p| p.score));
        let (dy0, dy1) = range(&mut self.points.iter().map(|p| p.dice));
        let span = (SIZE - 2 * MARGIN) as f64;
        for p in &self.points {
            let x = MARGIN as f64 + (p.score - sx0) / (sx1 - sx0) * span;
            let y = (SIZE - MARGIN) as f64 - (p.dice - dy0) / (dy1 - dy0) * span;
            for oy in -2isize..=2 {
                for ox in -2isize..=2 {
                    put((y as isize + oy) as usize, (x as isize + ox) as usize, [200, 40, 40]);
                }
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), SIZE as u32, SIZE as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        writer.write_image_data(&px).map_err(|e| Error::format(path, e.to_string()))?;
        writer.finish().map_err(|e| Error::format(path, e.to_string()))
    }
}
