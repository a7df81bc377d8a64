//! Image and deformation-field primitives: normalized grids, bilinear
//! pull-back warping with its adjoint, finite differences and separable
//! Gaussian smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::TooSmall { height, width });
    }
    Ok(())
}

fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
    if len != height * width {
        return Err(Error::BadConfig(format!(
            "buffer of length {len} does not describe a {height}x{width} grid"
        )));
    }
    Ok(())
}

fn check_range<T: Scalar>(values: &[T], bound: f64) -> Result<()> {
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let f = v.as_f64();
        if !(-bound..=bound).contains(&f) {
            return Err(Error::OutOfRange {
                value: f,
                lo: -bound,
                hi: bound,
            });
        }
    }
    Ok(())
}

/// A 2D scalar image with intensities in `[-1, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> ImageGrid<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        check_dims(height, width)?;
        check_len(height, width, values.len())?;
        check_range(&values, 1.0)?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(height, width, values)
    }

    /// Builds an image from arbitrary finite values by clamping them into
    /// `[-1, 1]`. Non-finite values are rejected.
    pub fn from_clamped(height: usize, width: usize, mut values: Vec<T>) -> Result<Self> {
        check_dims(height, width)?;
        check_len(height, width, values.len())?;
        let one = T::one();
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput);
            }
            *v = v.max(-one).min(one);
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Internal constructor for buffers that are in range by construction.
    pub(crate) fn from_raw_unchecked(height: usize, width: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        debug_assert!(values.iter().all(|v| v.abs() <= T::one()));
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (T, T) {
        self.values
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Applies `f` to every pixel and clamps the result into `[-1, 1]`.
    pub fn map_clamped(&self, mut f: impl FnMut(T) -> T) -> Result<Self> {
        Self::from_clamped(self.height, self.width, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> ImageGrid<U> {
        ImageGrid {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|v| U::lit(v.as_f64()).max(-U::one()).min(U::one()))
                .collect(),
        }
    }

    pub fn ensure_same_shape<S: Scalar>(&self, other: &ImageGrid<S>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }
}

/// Signed difference of two images; values lie in `[-2, 2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> ErrorMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        check_dims(height, width)?;
        check_len(height, width, values.len())?;
        check_range(&values, 2.0)?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// `a - b`, element-wise.
    pub fn difference(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<Self> {
        a.ensure_same_shape(b)?;
        let values = a.values.iter().zip(&b.values).map(|(&p, &q)| p - q).collect();
        Ok(Self {
            height: a.height,
            width: a.width,
            values,
        })
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn mean_abs(&self) -> T {
        let n = T::from_usize_lossy(self.values.len());
        self.values.iter().map(|v| v.abs()).sum::<T>() / n
    }
}

/// Per-pixel displacement `(dy, dx)` in pixels. Warping is output-referenced:
/// output pixel `p` samples the source at `p + field(p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationField<T> {
    height: usize,
    width: usize,
    /// Interleaved `(dy, dx)` pairs, row-major.
    values: Vec<T>,
}

impl<T: Scalar> DeformationField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![T::zero(); 2 * height * width],
        }
    }

    pub fn constant(height: usize, width: usize, dy: T, dx: T) -> Self {
        Self::from_fn(height, width, |_, _| (dy, dx))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        let mut values = Vec::with_capacity(2 * height * width);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = f(y, x);
                values.push(dy);
                values.push(dx);
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    /// Builds a field from an interleaved `(dy, dx)` buffer.
    pub fn from_interleaved(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != 2 * height * width {
            return Err(Error::BadConfig(format!(
                "field buffer of length {} does not describe a {height}x{width} field",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_interleaved(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (T, T) {
        let i = 2 * (y * self.width + x);
        (self.values[i], self.values[i + 1])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.ensure_shape(other.shape())?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| a + b).collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            values,
        })
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn magnitudes(&self) -> Vec<T> {
        self.values
            .chunks_exact(2)
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .collect()
    }

    pub fn max_magnitude(&self) -> T {
        self.magnitudes().into_iter().fold(T::zero(), |a, b| a.max(b))
    }

    pub fn mean_magnitude(&self) -> T {
        let m = self.magnitudes();
        let n = T::from_usize_lossy(m.len().max(1));
        m.into_iter().sum::<T>() / n
    }

    /// Mean Euclidean distance between two fields, optionally ignoring a
    /// border margin of `margin` pixels.
    pub fn mean_endpoint_error(&self, other: &Self, margin: usize) -> Result<T> {
        self.ensure_shape(other.shape())?;
        let mut total = T::zero();
        let mut count = 0usize;
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let (a0, a1) = self.get(y, x);
                let (b0, b1) = other.get(y, x);
                total += ((a0 - b0).powi(2) + (a1 - b1).powi(2)).sqrt();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyRegion);
        }
        Ok(total / T::from_usize_lossy(count))
    }

    pub fn cast<U: Scalar>(&self) -> DeformationField<U> {
        DeformationField {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn ensure_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: self.shape(),
            });
        }
        Ok(())
    }
}

/// Maps raw intensities into `[-1, 1]` via `2 (clamp(v, lo, hi) - lo) / (hi - lo) - 1`.
pub fn normalize<T: Scalar>(raw: &[T], height: usize, width: usize, lo: T, hi: T) -> Result<ImageGrid<T>> {
    if raw.iter().any(|v| !v.is_finite()) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    if lo >= hi {
        return Err(Error::DegenerateRange {
            lo: lo.as_f64(),
            hi: hi.as_f64(),
        });
    }
    let two = T::lit(2.0);
    let span = hi - lo;
    let values = raw
        .iter()
        .map(|&v| {
            let t = two * (v.max(lo).min(hi) - lo) / span - T::one();
            t.max(-T::one()).min(T::one())
        })
        .collect();
    check_dims(height, width)?;
    check_len(height, width, raw.len())?;
    Ok(ImageGrid::from_raw_unchecked(height, width, values))
}

/// Bilinear interpolation weights for a (clamped) sampling position.
#[derive(Debug, Clone, Copy)]
struct Bilinear<T> {
    y0: usize,
    x0: usize,
    fy: T,
    fx: T,
    /// false when the coordinate was clamped; the derivative is zero there.
    y_free: bool,
    x_free: bool,
}

#[inline]
fn bilinear_coords<T: Scalar>(y: T, x: T, height: usize, width: usize) -> Bilinear<T> {
    let ymax = T::from_usize_lossy(height - 1);
    let xmax = T::from_usize_lossy(width - 1);
    let y_free = y >= T::zero() && y <= ymax;
    let x_free = x >= T::zero() && x <= xmax;
    let yc = y.max(T::zero()).min(ymax);
    let xc = x.max(T::zero()).min(xmax);
    let y0 = yc.floor().to_usize().unwrap_or(0).min(height - 2);
    let x0 = xc.floor().to_usize().unwrap_or(0).min(width - 2);
    Bilinear {
        y0,
        x0,
        fy: yc - T::from_usize_lossy(y0),
        fx: xc - T::from_usize_lossy(x0),
        y_free,
        x_free,
    }
}

/// Samples `values` (a `height x width` grid) at a fractional position with
/// clamp-to-edge borders.
#[inline]
pub fn sample_bilinear<T: Scalar>(values: &[T], height: usize, width: usize, y: T, x: T) -> T {
    let b = bilinear_coords(y, x, height, width);
    let i = b.y0 * width + b.x0;
    let (v00, v01, v10, v11) = (values[i], values[i + 1], values[i + width], values[i + width + 1]);
    let one = T::one();
    (one - b.fy) * ((one - b.fx) * v00 + b.fx * v01) + b.fy * ((one - b.fx) * v10 + b.fx * v11)
}

/// Pull-back warp of a raw grid: `out(p) = values(p + field(p))`.
pub(crate) fn warp_values<T: Scalar>(values: &[T], field: &DeformationField<T>) -> Vec<T> {
    let (h, w) = field.shape();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = field.get(y, x);
            let sy = T::from_usize_lossy(y) + dy;
            let sx = T::from_usize_lossy(x) + dx;
            out.push(sample_bilinear(values, h, w, sy, sx));
        }
    }
    out
}

/// Warps `image` by `field` with bilinear interpolation and clamped borders.
pub fn warp<T: Scalar>(image: &ImageGrid<T>, field: &DeformationField<T>) -> Result<ImageGrid<T>> {
    field.ensure_shape(image.shape())?;
    let out = warp_values(&image.values, field);
    // Bilinear weights are convex, but rounding may nudge a value past +-1.
    let one = T::one();
    let out = out.into_iter().map(|v| v.max(-one).min(one)).collect();
    Ok(ImageGrid::from_raw_unchecked(image.height, image.width, out))
}

/// Vector-Jacobian products of [`warp`].
#[derive(Debug, Clone)]
pub struct WarpGradients<T> {
    /// d loss / d image, row-major.
    pub image: Vec<T>,
    /// d loss / d field, interleaved `(dy, dx)`.
    pub field: Vec<T>,
}

/// Back-propagates `upstream = d loss / d warped` through [`warp`].
pub fn warp_vjp<T: Scalar>(
    image: &ImageGrid<T>,
    field: &DeformationField<T>,
    upstream: &[T],
) -> Result<WarpGradients<T>> {
    field.ensure_shape(image.shape())?;
    let (h, w) = image.shape();
    if upstream.len() != h * w {
        return Err(Error::ShapeMismatch {
            expected: (h, w),
            actual: (upstream.len() / w.max(1), w),
        });
    }
    let one = T::one();
    let vals = &image.values;
    let mut g_img = vec![T::zero(); h * w];
    let mut g_field = vec![T::zero(); 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let g = upstream[p];
            if g == T::zero() {
                continue;
            }
            let (dy, dx) = field.get(y, x);
            let b = bilinear_coords(T::from_usize_lossy(y) + dy, T::from_usize_lossy(x) + dx, h, w);
            let i = b.y0 * w + b.x0;
            let (v00, v01, v10, v11) = (vals[i], vals[i + 1], vals[i + w], vals[i + w + 1]);
            g_img[i] += g * (one - b.fy) * (one - b.fx);
            g_img[i + 1] += g * (one - b.fy) * b.fx;
            g_img[i + w] += g * b.fy * (one - b.fx);
            g_img[i + w + 1] += g * b.fy * b.fx;
            if b.y_free {
                g_field[2 * p] += g * ((one - b.fx) * (v10 - v00) + b.fx * (v11 - v01));
            }
            if b.x_free {
                g_field[2 * p + 1] += g * ((one - b.fy) * (v01 - v00) + b.fy * (v11 - v10));
            }
        }
    }
    Ok(WarpGradients {
        image: g_img,
        field: g_field,
    })
}

/// Forward finite differences of a deformation field.
///
/// Index layout is `[y][x][component][direction]`, where component 0 is `dy`,
/// 1 is `dx`, direction 0 is along rows (y) and 1 along columns (x). The
/// trailing row/column gets a zero difference.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGradient<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> SpatialGradient<T> {
    #[inline]
    pub fn get(&self, y: usize, x: usize, component: usize, direction: usize) -> T {
        self.values[((y * self.width + x) * 2 + component) * 2 + direction]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

pub fn spatial_gradient<T: Scalar>(field: &DeformationField<T>) -> SpatialGradient<T> {
    let (h, w) = field.shape();
    let mut values = vec![T::zero(); 4 * h * w];
    for y in 0..h {
        for x in 0..w {
            let here = field.get(y, x);
            let base = (y * w + x) * 4;
            if y + 1 < h {
                let below = field.get(y + 1, x);
                values[base] = below.0 - here.0;
                values[base + 2] = below.1 - here.1;
            }
            if x + 1 < w {
                let right = field.get(y, x + 1);
                values[base + 1] = right.0 - here.0;
                values[base + 3] = right.1 - here.1;
            }
        }
    }
    SpatialGradient {
        height: h,
        width: w,
        values,
    }
}

/// Normalized 1D Gaussian kernel truncated at `truncate * sigma`.
pub fn gaussian_kernel<T: Scalar>(sigma: T, truncate: T) -> Vec<T> {
    let radius = (truncate * sigma).ceil().to_usize().unwrap_or(0);
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let mut k: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let d = T::from_usize_lossy(i) - T::from_usize_lossy(radius);
            (-(d * d) / two_s2).exp()
        })
        .collect();
    let s: T = k.iter().copied().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Symmetric (half-sample) reflection of an index into `0..n`.
#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian smoothing with symmetric reflection at the borders.
pub fn gaussian_blur<T: Scalar>(values: &[T], height: usize, width: usize, sigma: T, truncate: T) -> Vec<T> {
    if sigma <= T::zero() {
        return values.to_vec();
    }
    let kernel = gaussian_kernel(sigma, truncate);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![T::zero(); height * width];
    for y in 0..height {
        let row = &values[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = T::zero();
            for (j, &kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect_index(x as isize + j as isize - r, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![T::zero(); height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = T::zero();
            for (j, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect_index(y as isize + j as isize - r, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}
