//! Intensity-distribution augmentation: Shuffle Remap and the monotone
//! Bézier histogram shift it is compared against.
//!
//! Shuffle Remap cuts `[-1, 1]` at random control points and moves every
//! segment, affinely, onto a randomly chosen target segment.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rng::SeedStream;
use crate::scalar::Scalar;

/// Minimum spacing between neighbouring control points.
pub const MIN_CONTROL_GAP: f64 = 1e-4;
/// Default interior control-point count range.
pub const DEFAULT_N_MIN: usize = 2;
pub const DEFAULT_N_MAX: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapSpec {
    control_points: Vec<f64>,
    permutation: Vec<usize>,
}

impl RemapSpec {
    pub fn new(control_points: Vec<f64>, permutation: Vec<usize>) -> Result<Self> {
        let spec = Self {
            control_points,
            permutation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with the given cut points and the identity permutation.
    pub fn identity(control_points: Vec<f64>) -> Result<Self> {
        let n = control_points.len().saturating_sub(1);
        Self::new(control_points, (0..n).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.control_points;
        if p.len() < 2 {
            return Err(Error::InvalidSpec("need at least one segment".into()));
        }
        if p[0] != -1.0 || p[p.len() - 1] != 1.0 {
            return Err(Error::InvalidSpec("endpoints must be -1 and 1".into()));
        }
        if p.windows(2).any(|w| !(w[1] > w[0])) || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("control points must be strictly increasing".into()));
        }
        let n = p.len() - 1;
        if self.permutation.len() != n {
            return Err(Error::InvalidSpec(format!(
                "permutation has {} entries for {n} segments",
                self.permutation.len()
            )));
        }
        let mut seen = vec![false; n];
        for &t in &self.permutation {
            if t >= n || seen[t] {
                return Err(Error::InvalidSpec("permutation is not a bijection".into()));
            }
            seen[t] = true;
        }
        Ok(())
    }

    pub fn control_points(&self) -> &[f64] {
        &self.control_points
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn segments(&self) -> usize {
        self.control_points.len() - 1
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &t)| i == t)
    }

    /// Source segment index of `x`; segments are half-open except the last,
    /// which also holds `1.0`.
    pub fn segment_of(&self, x: f64) -> usize {
        let interior = &self.control_points[1..self.control_points.len() - 1];
        interior.partition_point(|&p| p <= x)
    }

    /// Remaps a single intensity.
    pub fn map_value(&self, x: f64) -> f64 {
        let x = x.clamp(-1.0, 1.0);
        let i = self.segment_of(x);
        let j = self.permutation[i];
        let p = &self.control_points;
        let (lo, hi) = (p[i], p[i + 1]);
        let (tlo, thi) = (p[j], p[j + 1]);
        let out = (x - lo) / (hi - lo) * (thi - tlo) + tlo;
        out.clamp(-1.0, 1.0)
    }
}

/// Samples a Shuffle Remap spec with `n_min..=n_max` interior control points.
pub fn sample_remap(stream: &mut SeedStream, n_min: usize, n_max: usize) -> Result<RemapSpec> {
    if n_min < 1 || n_min > n_max {
        return Err(Error::BadRange {
            name: "remap control-point count",
            lo: n_min as f64,
            hi: n_max as f64,
        });
    }
    let n = stream.uniform_usize(n_min, n_max);
    let points = loop {
        let mut interior: Vec<f64> = (0..n)
            .map(|_| stream.uniform::<f64>(-1.0, 1.0))
            .collect();
        interior.sort_by(f64::total_cmp);
        let mut pts = Vec::with_capacity(n + 2);
        pts.push(-1.0);
        pts.extend(interior);
        pts.push(1.0);
        if pts.windows(2).all(|w| w[1] - w[0] >= MIN_CONTROL_GAP) {
            break pts;
        }
    };
    let mut permutation: Vec<usize> = (0..=n).collect();
    permutation.shuffle(stream);
    RemapSpec::new(points, permutation)
}

pub fn apply_remap<T: Scalar>(image: &ImageGrid<T>, spec: &RemapSpec) -> Result<ImageGrid<T>> {
    spec.validate()?;
    let values = image
        .values()
        .iter()
        .map(|&v| T::lit(spec.map_value(v.as_f64())))
        .collect();
    ImageGrid::new(image.height(), image.width(), values)
}

/// Number of lookup-table samples used to evaluate the Bézier curve.
pub const BEZIER_LUT_SIZE: usize = 1024;

/// Monotone cubic Bézier intensity curve over `[-1, 1]`.
///
/// The abscissae of the control points are fixed at `-1, -1/3, 1/3, 1`, so
/// the parameter `t` is an affine function of the input intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BezierSpec {
    ordinates: [f64; 4],
}

impl BezierSpec {
    pub fn new(inner_low: f64, inner_high: f64) -> Result<Self> {
        let ordinates = [-1.0, inner_low, inner_high, 1.0];
        if ordinates.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::InvalidSpec("Bézier ordinates must be non-decreasing in [-1, 1]".into()));
        }
        Ok(Self { ordinates })
    }

    pub fn identity() -> Self {
        Self {
            ordinates: [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0],
        }
    }

    pub fn sample(stream: &mut SeedStream) -> Self {
        let a: f64 = stream.uniform(-1.0, 1.0);
        let b: f64 = stream.uniform(-1.0, 1.0);
        Self {
            ordinates: [-1.0, a.min(b), a.max(b), 1.0],
        }
    }

    pub fn ordinates(&self) -> [f64; 4] {
        self.ordinates
    }

    fn eval(&self, t: f64) -> f64 {
        let s = 1.0 - t;
        let [p0, p1, p2, p3] = self.ordinates;
        s * s * s * p0 + 3.0 * s * s * t * p1 + 3.0 * s * t * t * p2 + t * t * t * p3
    }

    pub fn lookup_table(&self) -> Vec<f64> {
        (0..BEZIER_LUT_SIZE)
            .map(|i| self.eval(i as f64 / (BEZIER_LUT_SIZE - 1) as f64))
            .collect()
    }
}

fn lut_lookup(lut: &[f64], x: f64) -> f64 {
    let pos = (x.clamp(-1.0, 1.0) + 1.0) * 0.5 * (lut.len() - 1) as f64;
    let i = (pos.floor() as usize).min(lut.len() - 2);
    let f = pos - i as f64;
    (lut[i] * (1.0 - f) + lut[i + 1] * f).clamp(-1.0, 1.0)
}

pub fn apply_bezier<T: Scalar>(image: &ImageGrid<T>, spec: &BezierSpec) -> Result<ImageGrid<T>> {
    let lut = spec.lookup_table();
    let values = image
        .values()
        .iter()
        .map(|&v| T::lit(lut_lookup(&lut, v.as_f64())))
        .collect();
    ImageGrid::new(image.height(), image.width(), values)
}

/// Applies a freshly sampled monotone Bézier intensity curve.
pub fn bezier_shift<T: Scalar>(image: &ImageGrid<T>, stream: &mut SeedStream) -> Result<ImageGrid<T>> {
    apply_bezier(image, &BezierSpec::sample(stream))
}
