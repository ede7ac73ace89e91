//! Small dense vector and matrix helpers.

use alloc::vec;
use alloc::vec::Vec;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Cosine similarity, clamped to `[-1, 1]`. Zero vectors give 0.
///
/// The denominator is `sqrt(|a|² |b|²)` so that `cosine(x, x)` is exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = libm::sqrt(dot(a, a) * dot(b, b));
    if denom == 0.0 {
        return 0.0;
    }
    (dot(a, b) / denom).clamp(-1.0, 1.0)
}

pub fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = libm::sqrt(aa * bb);
    if denom == 0.0 {
        return 0.0;
    }
    (ab / denom).clamp(-1.0, 1.0)
}

/// Returns `None` for an all-zero vector.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(a.iter().map(|x| x / n).collect())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(xs.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| libm::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Orthonormal basis of the span of `vectors` (modified Gram-Schmidt with
/// one re-orthogonalization pass). Vectors whose remaining norm falls below
/// `rel_tol` times the largest input norm are treated as dependent.
pub fn orthonormal_basis(vectors: &[Vec<f64>], rel_tol: f64) -> Vec<Vec<f64>> {
    let max_norm = vectors.iter().map(|v| norm(v)).fold(0.0, f64::max);
    let cutoff = max_norm * rel_tol;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &r);
                r.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
            }
        }
        let n = norm(&r);
        if n > cutoff && n > 0.0 {
            r.iter_mut().for_each(|x| *x /= n);
            basis.push(r);
        }
        if let Some(first) = basis.first() {
            if basis.len() == first.len() {
                break;
            }
        }
    }
    basis
}

/// `v - P v` where `P` projects onto the span of the orthonormal `basis`.
pub fn projection_residual(basis: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut r = v.to_vec();
    for q in basis {
        let c = dot(q, v);
        r.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_cosine_is_exactly_one() {
        let v = [0.3, -1.7, 2.25, 1e-3, 7.0];
        assert_eq!(cosine(&v, &v), 1.0);
        let w: Vec<f64> = v.iter().map(|x| x * 3.5).collect();
        assert!((cosine(&v, &w) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn residual_vanishes_inside_span() {
        let vs = alloc::vec![alloc::vec![1.0, 1.0, 0.0], alloc::vec![2.0, 2.0, 0.0], alloc::vec![0.0, 1.0, 0.0]];
        let basis = orthonormal_basis(&vs, 1e-12);
        assert_eq!(basis.len(), 2);
        let r = projection_residual(&basis, &[3.0, -2.0, 0.0]);
        assert!(r.iter().all(|x| x.abs() < 1e-12));
        let r = projection_residual(&basis, &[0.0, 0.0, 5.0]);
        assert!((r[2] - 5.0).abs() < 1e-12);
    }
}
