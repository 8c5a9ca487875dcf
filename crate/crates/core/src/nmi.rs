//! Discrete information measures over weight tensors.
//!
//! Continuous weights are discretized with equal-width bins spanning each
//! vector's own `[min, max]`; entropies are in nats. Element `t` of one
//! vector is paired with element `t` of the other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BINS: usize = 64;

/// Occupancy counts of a single discretized variable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn from_indices(indices: &[u32], bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        for &i in indices {
            counts[i as usize] += 1;
        }
        Self {
            counts,
            total: indices.len() as u64,
        }
    }
}

/// Row-major `bins × bins` co-occurrence counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointHistogram {
    pub bins: usize,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl JointHistogram {
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let bins = rows.len();
        if rows.iter().any(|r| r.len() != bins) {
            return Err(Error::InvalidInput("joint histogram must be square".into()));
        }
        let counts: Vec<u64> = rows.iter().flatten().copied().collect();
        let total = counts.iter().sum();
        Ok(Self { bins, counts, total })
    }

    pub fn from_indices(x: &[u32], y: &[u32], bins: usize) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::SampleLengthMismatch(x.len(), y.len()));
        }
        let mut counts = vec![0u64; bins * bins];
        for (&a, &b) in x.iter().zip(y) {
            counts[a as usize * bins + b as usize] += 1;
        }
        Ok(Self {
            bins,
            counts,
            total: x.len() as u64,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.bins + col]
    }

    /// Marginal of the first variable (row sums).
    pub fn row_marginal(&self) -> Histogram {
        Histogram::from_counts(
            self.counts
                .chunks_exact(self.bins.max(1))
                .map(|r| r.iter().sum())
                .collect(),
        )
    }

    /// Marginal of the second variable (column sums).
    pub fn col_marginal(&self) -> Histogram {
        let mut counts = vec![0u64; self.bins];
        for row in self.counts.chunks_exact(self.bins.max(1)) {
            for (c, &v) in counts.iter_mut().zip(row) {
                *c += v;
            }
        }
        Histogram::from_counts(counts)
    }
}

/// Equal-width bin index of every value over the vector's own range.
///
/// The maximum maps to the last bin; a constant vector maps entirely to 0.
pub fn discretize<T: Scalar>(values: &[T], bins: usize) -> Result<Vec<u32>> {
    if bins < 2 || bins > u32::MAX as usize {
        return Err(Error::InvalidInput(format!(
            "bin count must be at least 2, got {bins}"
        )));
    }
    if values.is_empty() {
        return Err(Error::InvalidInput("cannot discretize an empty vector".into()));
    }
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range <= T::zero() {
        return Ok(vec![0; values.len()]);
    }
    let scale = T::of_usize(bins) / range;
    let last = (bins - 1) as u32;
    Ok(values
        .iter()
        .map(|&v| {
            let idx = ((v - lo) * scale).floor().to_u32().unwrap_or(last);
            idx.min(last)
        })
        .collect())
}

/// Summed over the sorted nonzero counts so the result depends only on the
/// multiset of counts: a transposed joint table gives a bit-identical value.
fn entropy_of_counts<T: Scalar>(counts: impl Iterator<Item = u64>, total: u64) -> T {
    let mut nonzero: Vec<u64> = counts.filter(|&c| c > 0).collect();
    nonzero.sort_unstable();
    let n = T::of(total as f64);
    let mut h = T::zero();
    for c in nonzero {
        let p = T::of(c as f64) / n;
        h = h - p * p.ln();
    }
    // -0.0 and sub-ulp negatives come from single-cell histograms.
    h.max(T::zero())
}

/// Shannon entropy in nats; empty cells contribute nothing.
pub fn entropy<T: Scalar>(h: &Histogram) -> T {
    assert!(h.total > 0, "entropy of an empty histogram");
    entropy_of_counts(h.counts.iter().copied(), h.total)
}

pub fn joint_entropy<T: Scalar>(j: &JointHistogram) -> T {
    assert!(j.total > 0, "entropy of an empty histogram");
    entropy_of_counts(j.counts.iter().copied(), j.total)
}

/// I(X;Y) = H(X) + H(Y) − H(X,Y), from the joint table's marginals.
pub fn mutual_information<T: Scalar>(j: &JointHistogram) -> T {
    let hx: T = entropy(&j.row_marginal());
    let hy: T = entropy(&j.col_marginal());
    mi_from_parts(hx, hy, joint_entropy(j))
}

fn mi_from_parts<T: Scalar>(hx: T, hy: T, hxy: T) -> T {
    let mi = hx + hy - hxy;
    if mi < T::zero() && -mi <= T::mi_guard() {
        T::zero()
    } else {
        mi
    }
}

/// Normalized mutual information, with a flag for constant inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nmi<T> {
    pub value: T,
    /// One side had zero entropy; `value` is then defined as 0.
    pub degenerate: bool,
}

fn nmi_from_joint<T: Scalar>(j: &JointHistogram, hx: T, hy: T) -> Nmi<T> {
    if hx <= T::zero() || hy <= T::zero() {
        return Nmi {
            value: T::zero(),
            degenerate: true,
        };
    }
    let mi = mi_from_parts(hx, hy, joint_entropy(j));
    let v = mi / (hx * hy).sqrt();
    debug_assert!(
        v >= -T::unit_guard() && v <= T::one() + T::unit_guard(),
        "nmi {v} escaped [0, 1] beyond rounding"
    );
    Nmi {
        value: v.max(T::zero()).min(T::one()),
        degenerate: false,
    }
}

/// NMI(X,Y) = I(X;Y) / sqrt(H(X) H(Y)) over paired bin indices.
pub fn nmi<T: Scalar>(x_bins: &[u32], y_bins: &[u32], bins: usize) -> Result<Nmi<T>> {
    if x_bins.len() != y_bins.len() {
        return Err(Error::SampleLengthMismatch(x_bins.len(), y_bins.len()));
    }
    if x_bins.is_empty() {
        return Err(Error::InvalidInput("nmi of empty samples".into()));
    }
    if let Some(&bad) = x_bins.iter().chain(y_bins).find(|&&b| b as usize >= bins) {
        return Err(Error::InvalidInput(format!(
            "bin index {bad} out of range for {bins} bins"
        )));
    }
    let j = JointHistogram::from_indices(x_bins, y_bins, bins)?;
    let hx = entropy(&j.row_marginal());
    let hy = entropy(&j.col_marginal());
    Ok(nmi_from_joint(&j, hx, hy))
}

/// A discretized weight matrix with its marginal entropy cached.
#[derive(Clone, Debug)]
pub struct DiscretizedTensor<T> {
    pub indices: Vec<u32>,
    pub entropy: T,
}

impl<T: Scalar> DiscretizedTensor<T> {
    pub fn new(values: &[T], bins: usize) -> Result<Self> {
        let indices = discretize(values, bins)?;
        let entropy = entropy(&Histogram::from_indices(&indices, bins));
        Ok(Self { indices, entropy })
    }

    pub fn from_f64(values: &[f64], bins: usize) -> Result<Self> {
        let converted: Vec<T> = values.iter().map(|&v| T::of(v)).collect();
        Self::new(&converted, bins)
    }

    /// NMI against another tensor discretized with the same bin count.
    pub fn nmi(&self, other: &Self, bins: usize) -> Result<Nmi<T>> {
        let j = JointHistogram::from_indices(&self.indices, &other.indices, bins)?;
        Ok(nmi_from_joint(&j, self.entropy, other.entropy))
    }
}

/// Per-sublayer NMIs between two experts and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyScore<T> {
    pub per_sublayer: Vec<T>,
    pub mean: T,
    /// At least one sublayer pair was degenerate.
    pub degenerate: bool,
}

impl<T: Scalar> RedundancyScore<T> {
    pub fn from_sublayers(scores: &[Nmi<T>]) -> Self {
        let per_sublayer: Vec<T> = scores.iter().map(|s| s.value).collect();
        let mean = per_sublayer.iter().copied().sum::<T>() / T::of_usize(per_sublayer.len().max(1));
        Self {
            per_sublayer,
            mean,
            degenerate: scores.iter().any(|s| s.degenerate),
        }
    }
}

/// Redundancy between two pre-discretized experts (same sublayer order).
pub fn redundancy_between<T: Scalar>(
    a: &[DiscretizedTensor<T>],
    b: &[DiscretizedTensor<T>],
    bins: usize,
) -> Result<RedundancyScore<T>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "experts have {} and {} sublayers",
            a.len(),
            b.len()
        )));
    }
    let mut scores = Vec::with_capacity(a.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.indices.len() != y.indices.len() {
            return Err(Error::InvalidInput(format!(
                "sublayer {i} has {} and {} elements",
                x.indices.len(),
                y.indices.len()
            )));
        }
        scores.push(x.nmi(y, bins)?);
    }
    Ok(RedundancyScore::from_sublayers(&scores))
}

/// R between two experts given their raw sublayer weights.
pub fn expert_redundancy<T: Scalar, S: AsRef<[T]>>(
    expert_a: &[S],
    expert_b: &[S],
    bins: usize,
) -> Result<RedundancyScore<T>> {
    if expert_a.len() != expert_b.len() {
        return Err(Error::InvalidInput(format!(
            "experts have {} and {} sublayers",
            expert_a.len(),
            expert_b.len()
        )));
    }
    let disc = |e: &[S]| -> Result<Vec<DiscretizedTensor<T>>> {
        e.iter()
            .map(|w| DiscretizedTensor::new(w.as_ref(), bins))
            .collect()
    };
    for (i, (x, y)) in expert_a.iter().zip(expert_b).enumerate() {
        if x.as_ref().len() != y.as_ref().len() {
            return Err(Error::InvalidInput(format!(
                "sublayer {i} has {} and {} elements",
                x.as_ref().len(),
                y.as_ref().len()
            )));
        }
    }
    redundancy_between(&disc(expert_a)?, &disc(expert_b)?, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn discretize_equal_width() {
        assert_eq!(discretize(&[0.0, 0.5, 1.0], 2).unwrap(), vec![0, 1, 1]);
        assert_eq!(discretize(&[3.3f64; 100], 64).unwrap(), vec![0; 100]);
        assert!(matches!(discretize(&[1.0, f64::NAN], 4), Err(Error::NonFinite)));
        assert!(matches!(discretize(&[1.0, f64::INFINITY], 4), Err(Error::NonFinite)));
        assert!(discretize(&[1.0, 2.0], 1).is_err());
        assert!(discretize::<f64>(&[], 4).is_err());
    }

    #[test]
    fn entropy_examples() {
        let h: f64 = entropy(&Histogram::from_counts(vec![1, 1, 1, 1]));
        assert_abs_diff_eq!(h, 4f64.ln(), epsilon = 1e-12);
        let h: f64 = entropy(&Histogram::from_counts(vec![4, 0, 0, 0]));
        assert_eq!(h, 0.0);
        // -(0.75 ln 0.75 + 0.25 ln 0.25)
        let h: f64 = entropy(&Histogram::from_counts(vec![3, 1]));
        assert_abs_diff_eq!(h, 0.5623351446188083, epsilon = 1e-12);
    }

    #[test]
    fn mutual_information_examples() {
        let mi = |rows: &[Vec<u64>]| -> f64 {
            mutual_information(&JointHistogram::from_rows(rows).unwrap())
        };
        assert_abs_diff_eq!(mi(&[vec![2, 0], vec![0, 2]]), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(mi(&[vec![1, 1], vec![1, 1]]), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mi(&[vec![2, 0], vec![1, 1]]), 0.21576155433883565, epsilon = 1e-12);
    }

    #[test]
    fn nmi_examples() {
        let v: Nmi<f64> = nmi(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_abs_diff_eq!(v.value, 1.0, epsilon = 1e-12);
        let v: Nmi<f64> = nmi(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_abs_diff_eq!(v.value, 0.0, epsilon = 1e-12);
        let v: Nmi<f64> = nmi(&[0, 0, 1, 1], &[0, 0, 0, 1], 2).unwrap();
        assert_abs_diff_eq!(v.value, 0.3455920299442113, epsilon = 1e-12);
        assert!(!v.degenerate);
        assert!(matches!(
            nmi::<f64>(&[0, 1], &[0], 2),
            Err(Error::SampleLengthMismatch(2, 1))
        ));
    }

    #[test]
    fn constant_input_is_degenerate_zero() {
        let v: Nmi<f64> = nmi(&[0, 0, 0], &[0, 1, 0], 2).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.degenerate);
    }

    #[test]
    fn redundancy_of_copy_is_one() {
        let a = vec![vec![0.1, -0.3, 0.7, 0.2], vec![1.0, 2.0, 3.0, 5.0]];
        let r: RedundancyScore<f64> = expert_redundancy(&a, &a.clone(), 4).unwrap();
        assert_eq!(r.per_sublayer, vec![1.0, 1.0]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn redundancy_of_constant_experts_is_degenerate() {
        let a = vec![vec![2.0; 8], vec![-1.0; 8]];
        let b = vec![vec![0.5; 8], vec![3.0; 8]];
        let r: RedundancyScore<f64> = expert_redundancy(&a, &b, 64).unwrap();
        assert_eq!(r.mean, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn redundancy_is_unweighted_mean() {
        let s = [
            Nmi { value: 0.8, degenerate: false },
            Nmi { value: 0.4, degenerate: false },
        ];
        let r = RedundancyScore::<f64>::from_sublayers(&s);
        assert_abs_diff_eq!(r.mean, 0.6, epsilon = 1e-15);
    }

    #[test]
    fn redundancy_rejects_mismatched_structure() {
        let a = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let b = vec![vec![0.0, 1.0]];
        assert!(expert_redundancy::<f64, _>(&a, &b, 4).is_err());
        let b = vec![vec![0.0, 1.0], vec![0.0, 1.0, 2.0]];
        assert!(expert_redundancy::<f64, _>(&a, &b, 4).is_err());
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let x: Vec<f32> = (0..200).map(|i| ((i * 37) % 101) as f32 / 7.0).collect();
        let y: Vec<f32> = x.iter().map(|v| (v * 1.3).sin()).collect();
        let a32: RedundancyScore<f32> = expert_redundancy(&[&x[..]], &[&y[..]], 16).unwrap();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let y64: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let a64: RedundancyScore<f64> = expert_redundancy(&[&x64[..]], &[&y64[..]], 16).unwrap();
        assert_abs_diff_eq!(a32.mean as f64, a64.mean, epsilon = 1e-4);
    }
}
