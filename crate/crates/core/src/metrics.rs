//! Classical similarity measures used as registration losses and baselines.
//!
//! Every measure that can drive registration also exposes its gradient with
//! respect to the first (moving) image via [`Metric::loss_and_grad`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::scalar::Scalar;

pub const DEFAULT_NCC_WINDOW: usize = 9;
pub const DEFAULT_MI_BINS: usize = 32;
pub const NCC_EPSILON: f64 = 1e-5;
pub const MIND_VARIANCE_FLOOR: f64 = 1e-6;
pub const MIND_PATCH_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue<T> {
    pub value: T,
    pub direction: Direction,
}

impl<T: Scalar> MetricValue<T> {
    fn new(value: T, direction: Direction) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { value, direction })
    }

    /// True when `self` indicates at least as much similarity as `other`.
    pub fn at_least_as_good_as(&self, other: &Self) -> bool {
        match self.direction {
            Direction::LowerIsBetter => self.value <= other.value,
            Direction::HigherIsBetter => self.value >= other.value,
        }
    }
}

fn inv_count<T: Scalar>(n: usize) -> T {
    T::one() / T::from_usize_lossy(n)
}

pub fn mae<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<MetricValue<T>> {
    a.ensure_same_shape(b)?;
    let s: T = a.values().iter().zip(b.values()).map(|(&p, &q)| (p - q).abs()).sum();
    MetricValue::new(s * inv_count(a.len()), Direction::LowerIsBetter)
}

pub fn mse<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<MetricValue<T>> {
    a.ensure_same_shape(b)?;
    let s: T = a.values().iter().zip(b.values()).map(|(&p, &q)| (p - q) * (p - q)).sum();
    MetricValue::new(s * inv_count(a.len()), Direction::LowerIsBetter)
}

/// Sum over the `(2r+1)^2` window around every pixel, truncated at borders.
fn box_sum<T: Scalar>(values: &[T], h: usize, w: usize, r: usize) -> Vec<T> {
    let mut rows = vec![T::zero(); h * w];
    for y in 0..h {
        let mut prefix = Vec::with_capacity(w + 1);
        prefix.push(T::zero());
        for x in 0..w {
            let last = prefix[x];
            prefix.push(last + values[y * w + x]);
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            rows[y * w + x] = prefix[hi] - prefix[lo];
        }
    }
    let mut out = vec![T::zero(); h * w];
    for x in 0..w {
        let mut prefix = Vec::with_capacity(h + 1);
        prefix.push(T::zero());
        for y in 0..h {
            let last = prefix[y];
            prefix.push(last + rows[y * w + x]);
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            out[y * w + x] = prefix[hi] - prefix[lo];
        }
    }
    out
}

fn window_counts(h: usize, w: usize, r: usize) -> Vec<usize> {
    let span = |c: usize, n: usize| (c + r + 1).min(n) - c.saturating_sub(r);
    (0..h * w).map(|i| span(i / w, h) * span(i % w, w)).collect()
}

struct NccWindows<T> {
    ncc: Vec<T>,
    mean_a: Vec<T>,
    mean_b: Vec<T>,
    var_a: Vec<T>,
    denom: Vec<T>,
    counts: Vec<usize>,
}

fn ncc_windows<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, window: usize) -> NccWindows<T> {
    let r = window / 2;
    let eps = T::lit(NCC_EPSILON);
    let aa: Vec<T> = a.iter().map(|&v| v * v).collect();
    let bb: Vec<T> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<T> = a.iter().zip(b).map(|(&p, &q)| p * q).collect();
    let (sa, sb) = (box_sum(a, h, w, r), box_sum(b, h, w, r));
    let (saa, sbb, sab) = (box_sum(&aa, h, w, r), box_sum(&bb, h, w, r), box_sum(&ab, h, w, r));
    let counts = window_counts(h, w, r);
    let n = h * w;
    let mut out = NccWindows {
        ncc: Vec::with_capacity(n),
        mean_a: Vec::with_capacity(n),
        mean_b: Vec::with_capacity(n),
        var_a: Vec::with_capacity(n),
        denom: Vec::with_capacity(n),
        counts,
    };
    for i in 0..n {
        let inv = inv_count::<T>(out.counts[i]);
        let (ma, mb) = (sa[i] * inv, sb[i] * inv);
        let va = (saa[i] * inv - ma * ma).max(T::zero());
        let vb = (sbb[i] * inv - mb * mb).max(T::zero());
        let cov = sab[i] * inv - ma * mb;
        let d = ((va + eps) * (vb + eps)).sqrt();
        out.ncc.push(cov / d);
        out.mean_a.push(ma);
        out.mean_b.push(mb);
        out.var_a.push(va);
        out.denom.push(d);
    }
    out
}

/// Mean local zero-normalized cross-correlation over `window x window`
/// neighbourhoods (odd `window`).
pub fn ncc<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>, window: usize) -> Result<MetricValue<T>> {
    a.ensure_same_shape(b)?;
    check_window(window)?;
    let (h, w) = a.shape();
    let win = ncc_windows(a.values(), b.values(), h, w, window);
    let mean = win.ncc.iter().copied().sum::<T>() * inv_count(h * w);
    MetricValue::new(mean, Direction::HigherIsBetter)
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::BadConfig(format!("NCC window must be odd and >= 1, got {window}")));
    }
    Ok(())
}

/// d mean-NCC / d a.
fn ncc_grad<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, window: usize) -> (T, Vec<T>) {
    let r = window / 2;
    let eps = T::lit(NCC_EPSILON);
    let win = ncc_windows(a, b, h, w, window);
    let n = h * w;
    let mut alpha = Vec::with_capacity(n);
    let mut alpha_mb = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    let mut beta_ma = Vec::with_capacity(n);
    for i in 0..n {
        let inv = inv_count::<T>(win.counts[i]);
        let al = inv / win.denom[i];
        let be = win.ncc[i] * inv / (win.var_a[i] + eps);
        alpha.push(al);
        alpha_mb.push(al * win.mean_b[i]);
        beta.push(be);
        beta_ma.push(be * win.mean_a[i]);
    }
    let (s_al, s_almb) = (box_sum(&alpha, h, w, r), box_sum(&alpha_mb, h, w, r));
    let (s_be, s_bema) = (box_sum(&beta, h, w, r), box_sum(&beta_ma, h, w, r));
    let scale = inv_count::<T>(n);
    let grad = (0..n)
        .map(|q| scale * (b[q] * s_al[q] - s_almb[q] - a[q] * s_be[q] + s_bema[q]))
        .collect();
    let mean = win.ncc.iter().copied().sum::<T>() * scale;
    (mean, grad)
}

/// Linear partial-volume bin assignment: `(lower bin, weight of upper bin, inside)`.
#[inline]
fn soft_bin<T: Scalar>(v: T, bins: usize) -> (usize, T, bool) {
    let top = T::from_usize_lossy(bins - 1);
    let inside = v >= -T::one() && v <= T::one();
    let u = ((v.max(-T::one()).min(T::one()) + T::one()) * T::lit(0.5) * top).max(T::zero());
    let i = u.floor().to_usize().unwrap_or(0).min(bins - 2);
    (i, u - T::from_usize_lossy(i), inside)
}

/// Soft joint histogram over `[-1, 1]^2`, normalized to unit mass and
/// stored row-major as `[bin of a][bin of b]`.
pub fn joint_histogram<T: Scalar>(a: &[T], b: &[T], bins: usize) -> Vec<T> {
    let mut p = vec![T::zero(); bins * bins];
    let inv = inv_count::<T>(a.len());
    let one = T::one();
    for (&va, &vb) in a.iter().zip(b) {
        let (i, fa, _) = soft_bin(va, bins);
        let (j, fb, _) = soft_bin(vb, bins);
        p[i * bins + j] += (one - fa) * (one - fb) * inv;
        p[i * bins + j + 1] += (one - fa) * fb * inv;
        p[(i + 1) * bins + j] += fa * (one - fb) * inv;
        p[(i + 1) * bins + j + 1] += fa * fb * inv;
    }
    p
}

fn marginals<T: Scalar>(p: &[T], bins: usize) -> (Vec<T>, Vec<T>) {
    let mut pa = vec![T::zero(); bins];
    let mut pb = vec![T::zero(); bins];
    for i in 0..bins {
        for j in 0..bins {
            pa[i] += p[i * bins + j];
            pb[j] += p[i * bins + j];
        }
    }
    (pa, pb)
}

fn plogp_sum<T: Scalar>(p: &[T]) -> T {
    p.iter().filter(|&&v| v > T::zero()).map(|&v| v * v.ln()).sum()
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::BadConfig(format!("need at least 2 histogram bins, got {bins}")));
    }
    Ok(())
}

/// Shannon entropy (nats) of the soft intensity histogram of `a`.
pub fn histogram_entropy<T: Scalar>(a: &ImageGrid<T>, bins: usize) -> Result<T> {
    check_bins(bins)?;
    let (pa, _) = marginals(&joint_histogram(a.values(), a.values(), bins), bins);
    Ok(-plogp_sum(&pa))
}

/// Mutual information (nats) from the soft joint histogram.
pub fn mutual_information<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>, bins: usize) -> Result<MetricValue<T>> {
    a.ensure_same_shape(b)?;
    check_bins(bins)?;
    let p = joint_histogram(a.values(), b.values(), bins);
    let (pa, pb) = marginals(&p, bins);
    let mi = plogp_sum(&p) - plogp_sum(&pa) - plogp_sum(&pb);
    MetricValue::new(mi.max(T::zero()), Direction::HigherIsBetter)
}

/// d MI / d a.
fn mi_grad<T: Scalar>(a: &[T], b: &[T], bins: usize) -> (T, Vec<T>) {
    let p = joint_histogram(a, b, bins);
    let (pa, pb) = marginals(&p, bins);
    let mi = plogp_sum(&p) - plogp_sum(&pa) - plogp_sum(&pb);
    let g: Vec<T> = (0..bins * bins)
        .map(|k| {
            let (i, j) = (k / bins, k % bins);
            if p[k] > T::zero() {
                p[k].ln() - pa[i].ln() - pb[j].ln()
            } else {
                T::zero()
            }
        })
        .collect();
    let scale = inv_count::<T>(a.len()) * T::lit(0.5) * T::from_usize_lossy(bins - 1);
    let one = T::one();
    let grad = a
        .iter()
        .zip(b)
        .map(|(&va, &vb)| {
            let (i, _, inside) = soft_bin(va, bins);
            if !inside {
                return T::zero();
            }
            let (j, fb, _) = soft_bin(vb, bins);
            let row = |r: usize| g[r * bins + j] * (one - fb) + g[r * bins + j + 1] * fb;
            scale * (row(i + 1) - row(i))
        })
        .collect();
    (mi, grad)
}

const MIND_OFFSETS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn mind_patch_weights<T: Scalar>() -> [[T; 3]; 3] {
    let s2 = 2.0 * MIND_PATCH_SIGMA * MIND_PATCH_SIGMA;
    let mut w = [[0.0f64; 3]; 3];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 1.0, j as f64 - 1.0);
            *v = (-(dy * dy + dx * dx) / s2).exp();
            total += *v;
        }
    }
    w.map(|row| row.map(|v| T::lit(v / total)))
}

#[inline]
fn clamp_idx(c: usize, d: isize, n: usize) -> usize {
    (c as isize + d).clamp(0, n as isize - 1) as usize
}

/// Intermediate MIND quantities for one image.
struct MindState<T> {
    /// Patch distances `d_k(p)`, layout `[p][k]`.
    dist: Vec<[T; 4]>,
    variance: Vec<T>,
    /// Whether the variance floor was inactive at `p`.
    free: Vec<bool>,
    desc: Vec<[T; 4]>,
}

fn mind_state<T: Scalar>(img: &[T], h: usize, w: usize) -> MindState<T> {
    let n = h * w;
    let weights = mind_patch_weights::<T>();
    let mut sq = vec![[T::zero(); 4]; n];
    for y in 0..h {
        for x in 0..w {
            for (k, &(oy, ox)) in MIND_OFFSETS.iter().enumerate() {
                let q = clamp_idx(y, oy, h) * w + clamp_idx(x, ox, w);
                let d = img[y * w + x] - img[q];
                sq[y * w + x][k] = d * d;
            }
        }
    }
    let floor = T::lit(MIND_VARIANCE_FLOOR);
    let quarter = T::lit(0.25);
    let mut st = MindState {
        dist: vec![[T::zero(); 4]; n],
        variance: vec![T::zero(); n],
        free: vec![false; n],
        desc: vec![[T::zero(); 4]; n],
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut d = [T::zero(); 4];
            for (i, row) in weights.iter().enumerate() {
                for (j, &g) in row.iter().enumerate() {
                    let q = clamp_idx(y, i as isize - 1, h) * w + clamp_idx(x, j as isize - 1, w);
                    for k in 0..4 {
                        d[k] += g * sq[q][k];
                    }
                }
            }
            let mean = (d[0] + d[1] + d[2] + d[3]) * quarter;
            let v = mean.max(floor);
            st.free[p] = mean > floor;
            st.variance[p] = v;
            st.dist[p] = d;
            st.desc[p] = d.map(|dk| (-dk / v).exp());
        }
    }
    st
}

/// MIND descriptors `[p][k]` over the 4-neighbourhood, each in `(0, 1]`.
pub fn mind_descriptors<T: Scalar>(image: &ImageGrid<T>) -> Vec<[T; 4]> {
    let (h, w) = image.shape();
    mind_state(image.values(), h, w).desc
}

/// Mean absolute difference between MIND descriptors of `a` and `b`.
pub fn mind_loss<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<MetricValue<T>> {
    a.ensure_same_shape(b)?;
    let (da, db) = (mind_descriptors(a), mind_descriptors(b));
    let total: T = da
        .iter()
        .zip(&db)
        .map(|(p, q)| (0..4).map(|k| (p[k] - q[k]).abs()).sum::<T>())
        .sum();
    MetricValue::new(total * inv_count(4 * a.len()), Direction::LowerIsBetter)
}

/// d mind_loss / d a.
fn mind_grad<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize) -> (T, Vec<T>) {
    let n = h * w;
    let sa = mind_state(a, h, w);
    let sb = mind_state(b, h, w);
    let weights = mind_patch_weights::<T>();
    let inv = inv_count::<T>(4 * n);
    let quarter = T::lit(0.25);
    let mut loss = T::zero();
    // d loss / d d_k(p)
    let mut g_dist = vec![[T::zero(); 4]; n];
    for p in 0..n {
        let mut g_desc = [T::zero(); 4];
        for k in 0..4 {
            let diff = sa.desc[p][k] - sb.desc[p][k];
            loss += diff.abs();
            g_desc[k] = if diff > T::zero() {
                inv
            } else if diff < T::zero() {
                -inv
            } else {
                T::zero()
            };
        }
        let v = sa.variance[p];
        let mut through_v = T::zero();
        if sa.free[p] {
            for k in 0..4 {
                through_v += g_desc[k] * sa.desc[p][k] * sa.dist[p][k] / (v * v);
            }
        }
        for k in 0..4 {
            g_dist[p][k] = -g_desc[k] * sa.desc[p][k] / v + quarter * through_v;
        }
    }
    // Adjoint of the clamped 3x3 patch filter.
    let mut g_sq = vec![[T::zero(); 4]; n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for (i, row) in weights.iter().enumerate() {
                for (j, &g) in row.iter().enumerate() {
                    let q = clamp_idx(y, i as isize - 1, h) * w + clamp_idx(x, j as isize - 1, w);
                    for k in 0..4 {
                        g_sq[q][k] += g * g_dist[p][k];
                    }
                }
            }
        }
    }
    let two = T::lit(2.0);
    let mut grad = vec![T::zero(); n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for (k, &(oy, ox)) in MIND_OFFSETS.iter().enumerate() {
                let q = clamp_idx(y, oy, h) * w + clamp_idx(x, ox, w);
                let g = g_sq[p][k] * two * (a[p] - a[q]);
                grad[p] += g;
                grad[q] -= g;
            }
        }
    }
    (loss * inv, grad)
}

/// Classical similarity measure usable as a registration loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mae,
    Mse,
    Ncc,
    Mi,
    Mind,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [Self::Mae, Self::Mse, Self::Ncc, Self::Mi, Self::Mind];

    pub fn key(self) -> &'static str {
        match self {
            Self::Mae => "mae",
            Self::Mse => "mse",
            Self::Ncc => "ncc",
            Self::Mi => "mi",
            Self::Mind => "mind",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown metric {s:?}")))
    }
}

/// A configured similarity measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub ncc_window: usize,
    pub mi_bins: usize,
}

impl Metric {
    pub fn new(kind: MetricKind) -> Self {
        Self {
            kind,
            ncc_window: DEFAULT_NCC_WINDOW,
            mi_bins: DEFAULT_MI_BINS,
        }
    }

    pub fn evaluate<T: Scalar>(&self, a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<MetricValue<T>> {
        match self.kind {
            MetricKind::Mae => mae(a, b),
            MetricKind::Mse => mse(a, b),
            MetricKind::Ncc => ncc(a, b, self.ncc_window),
            MetricKind::Mi => mutual_information(a, b, self.mi_bins),
            MetricKind::Mind => mind_loss(a, b),
        }
    }

    /// Loss in lower-is-better form (`1 - ncc`, `-mi`, or the metric itself)
    /// and its gradient with respect to `moving`.
    pub fn loss_and_grad<T: Scalar>(&self, moving: &ImageGrid<T>, target: &ImageGrid<T>) -> Result<(T, Vec<T>)> {
        moving.ensure_same_shape(target)?;
        let (h, w) = moving.shape();
        let (a, b) = (moving.values(), target.values());
        let inv = inv_count::<T>(a.len());
        let out = match self.kind {
            MetricKind::Mae => {
                let mut loss = T::zero();
                let grad = a
                    .iter()
                    .zip(b)
                    .map(|(&p, &q)| {
                        let d = p - q;
                        loss += d.abs();
                        if d > T::zero() {
                            inv
                        } else if d < T::zero() {
                            -inv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                (loss * inv, grad)
            }
            MetricKind::Mse => {
                let mut loss = T::zero();
                let two = T::lit(2.0);
                let grad = a
                    .iter()
                    .zip(b)
                    .map(|(&p, &q)| {
                        loss += (p - q) * (p - q);
                        two * (p - q) * inv
                    })
                    .collect();
                (loss * inv, grad)
            }
            MetricKind::Ncc => {
                check_window(self.ncc_window)?;
                let (m, g) = ncc_grad(a, b, h, w, self.ncc_window);
                (T::one() - m, g.into_iter().map(|v| -v).collect())
            }
            MetricKind::Mi => {
                check_bins(self.mi_bins)?;
                let (m, g) = mi_grad(a, b, self.mi_bins);
                (-m, g.into_iter().map(|v| -v).collect())
            }
            MetricKind::Mind => mind_grad(a, b, h, w),
        };
        if !out.0.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn noise(h: usize, w: usize, seed: u64) -> ImageGrid<f64> {
        let mut s = SeedStream::new(seed);
        ImageGrid::from_fn(h, w, |_, _| s.uniform(-1.0, 1.0)).unwrap()
    }

    fn phantom16() -> ImageGrid<f64> {
        ImageGrid::from_fn(16, 16, |y, x| {
            let r = ((y as f64 - 7.5).powi(2) + (x as f64 - 6.0).powi(2)).sqrt();
            if r < 4.0 {
                0.8
            } else if r < 7.0 {
                -0.2
            } else {
                -0.9 + 0.05 * ((x + y) % 3) as f64
            }
        })
        .unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let n: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / n.max(1e-300)
    }

    fn fd_grad(metric: &Metric, a: &ImageGrid<f64>, b: &ImageGrid<f64>, step: f64) -> Vec<f64> {
        (0..a.len())
            .map(|i| {
                let mut plus = a.values().to_vec();
                plus[i] += step;
                let mut minus = a.values().to_vec();
                minus[i] -= step;
                let (h, w) = a.shape();
                let lp = metric.loss_and_grad(&ImageGrid::new(h, w, plus).unwrap(), b).unwrap().0;
                let lm = metric.loss_and_grad(&ImageGrid::new(h, w, minus).unwrap(), b).unwrap().0;
                (lp - lm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn mae_examples() {
        let a = ImageGrid::filled(3, 3, -1.0f64).unwrap();
        let b = ImageGrid::filled(3, 3, 1.0f64).unwrap();
        assert_eq!(mae(&a, &a).unwrap().value, 0.0);
        assert_eq!(mae(&a, &b).unwrap().value, 2.0);
        let c = ImageGrid::new(2, 2, vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let d = ImageGrid::new(2, 2, vec![1.0f64, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(mae(&c, &d).unwrap().value, 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = noise(4, 4, 1);
        let b = noise(4, 5, 2);
        assert!(matches!(mae(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(ncc(&a, &b, 3), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(mutual_information(&a, &b, 8), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(mind_loss(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn ncc_self_anti_and_affine() {
        let a = noise(16, 16, 3);
        let neg = a.map_clamped(|v| -v).unwrap();
        let aff = a.map_clamped(|v| 0.5 * v + 0.1).unwrap();
        assert!((ncc(&a, &a, 9).unwrap().value - 1.0).abs() < 1e-4);
        assert!((ncc(&a, &neg, 9).unwrap().value + 1.0).abs() < 1e-4);
        assert!((ncc(&a, &aff, 9).unwrap().value - 1.0).abs() < 1e-3);
        assert!(ncc(&a, &a, 4).is_err());
    }

    #[test]
    fn ncc_matches_brute_force_windows() {
        let a = noise(8, 8, 4);
        let b = noise(8, 8, 5);
        let r = 2isize;
        let mut total = 0.0;
        for y in 0..8isize {
            for x in 0..8isize {
                let mut px = Vec::new();
                for yy in (y - r).max(0)..=(y + r).min(7) {
                    for xx in (x - r).max(0)..=(x + r).min(7) {
                        px.push((a.get(yy as usize, xx as usize), b.get(yy as usize, xx as usize)));
                    }
                }
                let n = px.len() as f64;
                let ma = px.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = px.iter().map(|p| p.1).sum::<f64>() / n;
                let cov = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
                let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
                let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
                total += cov / ((va + NCC_EPSILON) * (vb + NCC_EPSILON)).sqrt();
            }
        }
        assert!((ncc(&a, &b, 5).unwrap().value - total / 64.0).abs() < 1e-12);
    }

    #[test]
    fn mi_of_self_is_entropy_on_bin_centres() {
        let bins = 8;
        let mut s = SeedStream::new(6);
        let a = ImageGrid::from_fn(12, 12, |_, _| {
            let k = s.uniform_usize(0, bins - 1);
            -1.0 + 2.0 * k as f64 / (bins - 1) as f64
        })
        .unwrap();
        let mi = mutual_information(&a, &a, bins).unwrap().value;
        let h = histogram_entropy(&a, bins).unwrap();
        assert!((mi - h).abs() < 1e-6);
    }

    #[test]
    fn mi_of_independent_noise_is_small() {
        for seed in 0..10 {
            let a = noise(100, 100, 100 + seed);
            let b = noise(100, 100, 200 + seed);
            let mi = mutual_information(&a, &b, DEFAULT_MI_BINS).unwrap().value;
            assert!(mi < 0.05, "seed {seed}: {mi}");
        }
    }

    #[test]
    fn remap_keeps_dependence_that_pixel_shuffling_destroys() {
        use crate::remap::{apply_remap, sample_remap};
        use rand::seq::SliceRandom;
        let a = phantom16();
        for seed in 0..20 {
            let mut s = SeedStream::new(seed);
            let spec = sample_remap(&mut s, 1, 20).unwrap();
            let remapped = apply_remap(&a, &spec).unwrap();
            let mut vals = a.values().to_vec();
            vals.shuffle(&mut s);
            let shuffled = ImageGrid::new(16, 16, vals).unwrap();
            let m1 = mutual_information(&a, &remapped, 32).unwrap().value;
            let m2 = mutual_information(&a, &shuffled, 32).unwrap().value;
            assert!(m1 >= m2, "seed {seed}: {m1} < {m2}");
        }
    }

    #[test]
    fn mind_examples() {
        let a = phantom16();
        assert_eq!(mind_loss(&a, &a).unwrap().value, 0.0);
        for d in mind_descriptors(&a) {
            assert!(d.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
        let half = a.map_clamped(|v| 0.5 * v).unwrap();
        assert!(mind_loss(&a, &half).unwrap().value < mae(&a, &half).unwrap().value);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = noise(12, 12, 7);
        let b = noise(12, 12, 8);
        for kind in MetricKind::ALL {
            let m = Metric::new(kind);
            let ab = m.evaluate(&a, &b).unwrap().value;
            let ba = m.evaluate(&b, &a).unwrap().value;
            assert!((ab - ba).abs() < 1e-6, "{kind:?}");
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let a = noise(8, 8, 9);
        let b = noise(8, 8, 10);
        for kind in MetricKind::ALL {
            let mut m = Metric::new(kind);
            m.ncc_window = 5;
            m.mi_bins = 8;
            let (_, g) = m.loss_and_grad(&a, &b).unwrap();
            let num = fd_grad(&m, &a, &b, 1e-6);
            let e = rel_err(&g, &num);
            assert!(e < 1e-3, "{kind:?}: relative error {e}");
        }
    }

    #[test]
    fn metric_keys_round_trip() {
        for kind in MetricKind::ALL {
            assert_eq!(kind.key().parse::<MetricKind>().unwrap(), kind);
        }
        assert!("imse".parse::<MetricKind>().is_err());
    }
}
