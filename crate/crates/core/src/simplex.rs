//! Block-simplex vectors: one probability vector per population, stored flat.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Partition of a flat vector into per-population blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl BlockLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Arc<Self>> {
        if sizes.is_empty() {
            return Err(Error::Validation("layout needs at least one block".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Validation("block sizes must be at least 1".into()));
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut total = 0;
        for &s in &sizes {
            offsets.push(total);
            total += s;
        }
        Ok(Arc::new(BlockLayout {
            sizes,
            offsets,
            total,
        }))
    }

    /// Number of populations.
    pub fn num_blocks(&self) -> usize {
        self.sizes.len()
    }

    /// Total flat dimension.
    pub fn total_dim(&self) -> usize {
        self.total
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn max_block_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    /// Flat index range of block `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.offsets[i];
        start..start + self.sizes[i]
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.sizes.len()).map(move |i| self.range(i))
    }
}

/// One nonnegative vector per population, each summing to one.
#[derive(Debug, Clone)]
pub struct BlockSimplexVector {
    layout: Arc<BlockLayout>,
    data: DVector<f64>,
}

/// Per-block sums must match 1 to this absolute tolerance.
pub const SIMPLEX_SUM_TOL: f64 = 1e-12;

impl BlockSimplexVector {
    /// Wraps `data`, checking nonnegativity and per-block normalization.
    pub fn new(layout: Arc<BlockLayout>, data: DVector<f64>) -> Result<Self> {
        if data.len() != layout.total_dim() {
            return Err(Error::Shape(format!(
                "expected {} entries, got {}",
                layout.total_dim(),
                data.len()
            )));
        }
        for range in layout.ranges() {
            let mut sum = 0.0;
            for j in range.clone() {
                let v = data[j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Domain(format!("entry {j} is {v}, must be >= 0")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
                return Err(Error::Domain(format!(
                    "block sums to {sum}, expected 1 within {SIMPLEX_SUM_TOL}"
                )));
            }
        }
        Ok(BlockSimplexVector { layout, data })
    }

    /// Wraps without checking; for internal updates that preserve the invariants.
    pub(crate) fn new_unchecked(layout: Arc<BlockLayout>, data: DVector<f64>) -> Self {
        BlockSimplexVector { layout, data }
    }

    /// Wraps arbitrary data with no validation. Callers own the invariants;
    /// intended for perturbation analysis, where points sit slightly off the
    /// simplex.
    pub fn from_flat_unchecked(layout: Arc<BlockLayout>, data: DVector<f64>) -> Self {
        BlockSimplexVector { layout, data }
    }

    /// Uniform distribution on every block.
    pub fn uniform(layout: Arc<BlockLayout>) -> Self {
        let mut data = DVector::zeros(layout.total_dim());
        for range in layout.ranges() {
            let w = 1.0 / range.len() as f64;
            for j in range {
                data[j] = w;
            }
        }
        BlockSimplexVector { layout, data }
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data.as_slice()[self.layout.range(i)]
    }

    pub fn min_entry(&self) -> f64 {
        self.data.min()
    }

    pub fn strictly_positive(&self) -> bool {
        self.data.iter().all(|&v| v > 0.0)
    }

    /// Checks the other vector shares this block structure.
    pub fn same_layout(&self, other: &BlockSimplexVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    /// Negative entropy sum(h ln h - h) over all blocks.
    pub fn neg_entropy(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| if v == 0.0 { 0.0 } else { v * v.ln() - v })
            .sum()
    }

    /// Euclidean distance to another vector of the same shape.
    pub fn dist(&self, other: &BlockSimplexVector) -> f64 {
        (&self.data - &other.data).norm()
    }
}

/// Kullback-Leibler divergence between block-simplex vectors, summed over blocks.
///
/// `to` may have zero entries (0 ln 0 := 0); `from` must be strictly positive.
pub fn kl_divergence(to: &BlockSimplexVector, from: &BlockSimplexVector) -> Result<f64> {
    if !to.same_layout(from) {
        return Err(Error::Shape("KL divergence needs matching layouts".into()));
    }
    let mut acc = 0.0;
    for (j, (&h, &hp)) in to.data.iter().zip(from.data.iter()).enumerate() {
        if hp <= 0.0 {
            return Err(Error::Domain(format!(
                "second argument has nonpositive entry {hp} at index {j}"
            )));
        }
        if h > 0.0 {
            acc += h * (h / hp).ln() - (h - hp);
        } else {
            acc += hp; // h ln(h/hp) -> 0, -(h - hp) = hp
        }
    }
    Ok(acc.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn layout(sizes: &[usize]) -> Arc<BlockLayout> {
        BlockLayout::new(sizes.to_vec()).unwrap()
    }

    #[test]
    fn uniform_blocks_sum_to_one() {
        let h = BlockSimplexVector::uniform(layout(&[3, 5]));
        assert_eq!(h.len(), 8);
        assert_relative_eq!(h.block(0).iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(h.block(1).iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(h.min_entry(), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn new_rejects_bad_blocks() {
        let l = layout(&[2]);
        assert!(BlockSimplexVector::new(l.clone(), DVector::from_vec(vec![0.7, 0.2])).is_err());
        assert!(BlockSimplexVector::new(l.clone(), DVector::from_vec(vec![1.2, -0.2])).is_err());
        assert!(BlockSimplexVector::new(l, DVector::from_vec(vec![0.5, 0.5])).is_ok());
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let h = BlockSimplexVector::uniform(layout(&[4, 2]));
        assert_eq!(kl_divergence(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_hand_value() {
        // Single block (0.5, 0.5) vs (0.25, 0.75): 0.5 ln(4/3) with mass terms cancelling.
        let l = layout(&[2]);
        let h = BlockSimplexVector::new(l.clone(), DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let hp = BlockSimplexVector::new(l, DVector::from_vec(vec![0.25, 0.75])).unwrap();
        let d = kl_divergence(&h, &hp).unwrap();
        assert_relative_eq!(d, 0.5 * (4.0f64 / 3.0).ln(), epsilon = 1e-15);
        assert_relative_eq!(d, 0.143_841_036_225_890_43, epsilon = 1e-12);
    }

    #[test]
    fn kl_rejects_zero_in_second_argument() {
        let l = layout(&[2]);
        let h = BlockSimplexVector::uniform(l.clone());
        let hp = BlockSimplexVector::new_unchecked(l, DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(kl_divergence(&h, &hp), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_handles_zero_in_first_argument() {
        let l = layout(&[2]);
        let h = BlockSimplexVector::new_unchecked(l.clone(), DVector::from_vec(vec![1.0, 0.0]));
        let hp = BlockSimplexVector::new(l, DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let d = kl_divergence(&h, &hp).unwrap();
        assert_relative_eq!(d, 2.0f64.ln(), epsilon = 1e-15);
    }
}
