//! Small dense primitives: vectors, row-major matrices and a slice-major
//! 3-axis tensor, plus the activations used by the model.
//!
//! Everything is `f64`. Shapes are checked on every fallible operation and
//! reported through [`Error::Shape`].

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return shape_err(format!("add: {} vs {}", self.len(), other.len()));
        }
        Ok(Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    /// Concatenation of several vectors in order.
    pub fn concat(parts: &[&[f64]]) -> Vector {
        let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            out.extend_from_slice(p);
        }
        Vector(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!("matrix {rows}x{cols} needs {} values, got {}", rows * cols, data.len()));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Mat::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return shape_err(format!("matvec: {}x{} · {}", self.rows, self.cols, v.len()));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v, &mut out);
        Ok(Vector(out))
    }

    /// `out += self · v` without shape checks. Callers guarantee sizes.
    #[inline]
    pub(crate) fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, v);
        }
    }

    #[inline]
    pub(crate) fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.matvec_acc(v, out);
    }

    /// `out += selfᵀ · v` without shape checks.
    #[inline]
    pub(crate) fn matvec_t_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&vr, row) in v.iter().zip(self.data.chunks_exact(self.cols)) {
            if vr != 0.0 {
                axpy(vr, row, out);
            }
        }
    }

    /// `self += a · bᵀ` without shape checks.
    #[inline]
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(cols)) {
            if ar != 0.0 {
                axpy(ar, b, row);
            }
        }
    }
}

/// Slice-major 3-axis tensor: `slices` matrices of `rows × cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    slices: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(slices: usize, rows: usize, cols: usize) -> Self {
        Tensor3 { slices, rows, cols, data: vec![0.0; slices * rows * cols] }
    }

    pub fn from_vec(slices: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != slices * rows * cols {
            return shape_err(format!("tensor {slices}x{rows}x{cols} needs {} values, got {}", slices * rows * cols, data.len()));
        }
        Ok(Tensor3 { slices, rows, cols, data })
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.rows * self.cols;
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn set(&mut self, k: usize, r: usize, c: usize, v: f64) {
        self.data[(k * self.rows + r) * self.cols + c] = v;
    }

    pub fn get(&self, k: usize, r: usize, c: usize) -> f64 {
        self.data[(k * self.rows + r) * self.cols + c]
    }
}

/// Component `k` of the result is `uᵀ T^k v`.
pub fn bilinear(t: &Tensor3, u: &[f64], v: &[f64]) -> Result<Vector> {
    if t.rows != u.len() || t.cols != v.len() {
        return shape_err(format!("bilinear: tensor {}x{} with u {} and v {}", t.rows, t.cols, u.len(), v.len()));
    }
    let mut out = vec![0.0; t.slices];
    bilinear_acc(t, u, v, &mut out);
    Ok(Vector(out))
}

#[inline]
pub(crate) fn bilinear_acc(t: &Tensor3, u: &[f64], v: &[f64], out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let s = t.slice(k);
        *o += u
            .iter()
            .zip(s.chunks_exact(t.cols))
            .map(|(&ur, row)| ur * dot(row, v))
            .sum::<f64>();
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &[f64]) -> Vector {
    Vector(v.iter().map(|&x| sigmoid_scalar(x)).collect())
}

pub fn tanh(v: &[f64]) -> Vector {
    Vector(v.iter().map(|x| x.tanh()).collect())
}

pub fn relu(v: &[f64]) -> Vector {
    Vector(v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect())
}

/// Per-dimension softmax across four gate vectors.
///
/// For every index `j` the four outputs at `j` are non-negative and sum to
/// one. The largest input at each index is subtracted before exponentiation.
pub fn softmax_by_row(gates: [&[f64]; 4]) -> Result<[Vector; 4]> {
    let d = gates[0].len();
    if gates.iter().any(|g| g.len() != d) {
        return shape_err("softmax_by_row: gate vectors differ in length");
    }
    let mut out = [Vector::zeros(d), Vector::zeros(d), Vector::zeros(d), Vector::zeros(d)];
    for j in 0..d {
        let col = [gates[0][j], gates[1][j], gates[2][j], gates[3][j]];
        let sm = softmax4(col);
        for p in 0..4 {
            out[p].0[j] = sm[p];
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn softmax4(x: [f64; 4]) -> [f64; 4] {
    let m = x[0].max(x[1]).max(x[2]).max(x[3]);
    let e = [(x[0] - m).exp(), (x[1] - m).exp(), (x[2] - m).exp(), (x[3] - m).exp()];
    let s = e[0] + e[1] + e[2] + e[3];
    [e[0] / s, e[1] / s, e[2] / s, e[3] / s]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matvec_cases() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(Mat::identity(3).matvec(&v).unwrap().0, vec![1.0, 2.0, 3.0]);
        assert_eq!(Mat::zeros(2, 3).matvec(&v).unwrap().0, vec![0.0, 0.0]);
        let m = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap().0, vec![3.0, 7.0]);
        assert!(m.matvec(&v).is_err());
    }

    #[test]
    fn transpose_and_outer_helpers() {
        let m = Mat::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let mut out = vec![0.0; 3];
        m.matvec_t_acc(&[1.0, -1.0], &mut out);
        assert_eq!(out, vec![-3.0, -3.0, -3.0]);
        let mut z = Mat::zeros(2, 2);
        z.add_outer(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(z.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn bilinear_cases() {
        let mut t = Tensor3::zeros(2, 2, 2);
        t.set(0, 0, 0, 1.0);
        t.set(0, 1, 1, 1.0);
        let out = bilinear(&t, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(out.0, vec![11.0, 0.0]);
        let zero = bilinear(&t, &[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(zero.0, vec![0.0, 0.0]);
        assert!(bilinear(&t, &[1.0], &[3.0, 4.0]).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(&[0.0]).0, vec![0.5]);
        assert_eq!(relu(&[-3.0, 3.0]).0, vec![0.0, 3.0]);
        assert_eq!(tanh(&[0.0]).0, vec![0.0]);
        assert!(sigmoid(&[-800.0, 800.0]).is_finite());
    }

    #[test]
    fn softmax_by_row_cases() {
        let a = [0.3, -1.0];
        let out = softmax_by_row([&a, &a, &a, &a]).unwrap();
        for g in &out {
            assert_eq!(g.0, vec![0.25, 0.25]);
        }

        let logs = [1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()];
        let out = softmax_by_row([&logs[0..1], &logs[1..2], &logs[2..3], &logs[3..4]]).unwrap();
        for (g, want) in out.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((g.0[0] - want).abs() < 1e-12);
        }

        let out = softmax_by_row([&[1000.0], &[0.0], &[0.0], &[0.0]]).unwrap();
        assert!((out[0].0[0] - 1.0).abs() < 1e-12);
        for g in &out[1..] {
            assert!(g.0[0].abs() < 1e-12);
        }

        assert!(softmax_by_row([&[0.0], &[0.0, 1.0], &[0.0], &[0.0]]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn softmax_is_simplex(v in prop::collection::vec(-50.0f64..50.0, 4 * 3)) {
            let (a, rest) = v.split_at(3);
            let (b, rest) = rest.split_at(3);
            let (c, d) = rest.split_at(3);
            let out = softmax_by_row([a, b, c, d]).unwrap();
            for j in 0..3 {
                let s: f64 = out.iter().map(|g| g.0[j]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(out.iter().all(|g| g.0[j] >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 4), shift in -50.0f64..50.0) {
            let base = softmax4([v[0], v[1], v[2], v[3]]);
            let moved = softmax4([v[0] + shift, v[1] + shift, v[2] + shift, v[3] + shift]);
            for p in 0..4 {
                prop_assert!((base[p] - moved[p]).abs() < 1e-12);
            }
        }

        #[test]
        fn activations_finite(v in prop::collection::vec(-1e6f64..1e6, 1..16)) {
            prop_assert!(sigmoid(&v).is_finite());
            prop_assert!(tanh(&v).is_finite());
            prop_assert!(relu(&v).is_finite());
        }
    }
}
