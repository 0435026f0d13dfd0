use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::exec;

/// Dense row-major matrix of `f64`.
///
/// Activations are laid out with channels along rows and tokens along
/// columns, so a sequence of `T` vectors of width `d` is a `d × T` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Tensor2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor2({}x{}) ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err("from_vec", format!("{} values for a {rows}x{cols} tensor", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            assert_eq!(r.len(), m, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: n, cols: m, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor2, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor2 {
        self.map(|v| v * s)
    }

    /// In-place `self += other`; shapes must match.
    pub fn accumulate(&mut self, other: &Tensor2) {
        assert_eq!(self.shape(), other.shape(), "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a `rows × 1` column to every column.
    pub fn add_col_broadcast(&self, col: &Tensor2) -> Result<Tensor2> {
        if col.cols != 1 || col.rows != self.rows {
            return shape_err("add_col_broadcast", format!("{:?} + {:?}", self.shape(), col.shape()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let b = col.data[r];
            for v in &mut out.data[r * self.cols..(r + 1) * self.cols] {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Sums over columns, giving a `rows × 1` tensor.
    pub fn sum_cols(&self) -> Tensor2 {
        let data = (0..self.rows).map(|r| self.row(r).iter().sum()).collect();
        Tensor2 {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Column concatenation `[self, other]`. Either side may have zero columns.
    pub fn hcat(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols == 0 && self.rows == 0 {
            return Ok(other.clone());
        }
        if other.cols == 0 && other.rows == 0 {
            return Ok(self.clone());
        }
        if self.rows != other.rows {
            return shape_err("hcat", format!("{:?} | {:?}", self.shape(), other.shape()));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Row concatenation (stacking `other` below `self`).
    pub fn vcat(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return shape_err("vcat", format!("{:?} over {:?}", self.shape(), other.shape()));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor2 {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor2 {
        assert!(start <= end && end <= self.cols, "slice_cols out of range");
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor2 {
            rows: self.rows,
            cols,
            data,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2 {
        assert!(start <= end && end <= self.rows, "slice_rows out of range");
        Tensor2 {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Gathers columns by index (repeats allowed).
    pub fn select_cols(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = &mut out.data[r * idx.len()..(r + 1) * idx.len()];
            for (d, &c) in dst.iter_mut().zip(idx) {
                *d = src[c];
            }
        }
        out
    }

    pub fn argmax_col(&self, c: usize) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..self.rows {
            let v = self.get(r, c);
            if v > best_v {
                best_v = v;
                best = r;
            }
        }
        best
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor2::zeros(n, m);
    exec::for_each_chunk(&mut out.data, m, n * k * m, |i, row| {
        matmul_row(&a.data[i * k..(i + 1) * k], b, row)
    });
    Ok(out)
}

/// Same product computed on the calling thread only.
pub fn matmul_serial(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor2::zeros(n, m);
    for (i, row) in out.data.chunks_mut(m.max(1)).enumerate().take(n) {
        matmul_row(&a.data[i * k..(i + 1) * k], b, row);
    }
    Ok(out)
}

#[inline]
fn matmul_row(a_row: &[f64], b: &Tensor2, out: &mut [f64]) {
    let m = b.cols;
    for (kk, &av) in a_row.iter().enumerate() {
        let b_row = &b.data[kk * m..(kk + 1) * m];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    matmul(&a.transpose(), b)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    matmul(a, &b.transpose())
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    x.map(|v| v.max(0.0))
}

/// Column-wise softmax. `-inf` entries are masked and come out as exactly 0.
pub fn softmax_cols(x: &Tensor2) -> Result<Tensor2> {
    let (rows, cols) = x.shape();
    let mut out = Tensor2::zeros(rows, cols);
    for c in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for r in 0..rows {
            let v = x.get(r, c);
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::NonFinite("softmax input"));
            }
            max = max.max(v);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyAttentionColumn(c));
        }
        let mut total = 0.0;
        for r in 0..rows {
            let v = x.get(r, c);
            let e = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
            out.set(r, c, e);
            total += e;
        }
        for r in 0..rows {
            let v = out.get(r, c) / total;
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`softmax_cols`] given its output `p`.
pub fn softmax_cols_backward(p: &Tensor2, grad: &Tensor2) -> Tensor2 {
    let (rows, cols) = p.shape();
    let mut out = Tensor2::zeros(rows, cols);
    for c in 0..cols {
        let mut dot = 0.0;
        for r in 0..rows {
            dot += p.get(r, c) * grad.get(r, c);
        }
        for r in 0..rows {
            out.set(r, c, p.get(r, c) * (grad.get(r, c) - dot));
        }
    }
    out
}

/// Row sums below this are treated as dead and get a uniform floor before
/// normalising.
pub const ROW_SUM_FLOOR: f64 = 1e-8;

/// Divides each row by its sum. Rows whose sum falls below
/// [`ROW_SUM_FLOOR`] first get `ROW_SUM_FLOOR` added to every entry.
///
/// Returns the normalised tensor and, per row, whether the floor was applied.
pub fn row_normalize(x: &Tensor2) -> (Tensor2, Vec<bool>) {
    let (rows, cols) = x.shape();
    let mut out = x.clone();
    let mut floored = vec![false; rows];
    for r in 0..rows {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        let mut s: f64 = row.iter().sum();
        if s < ROW_SUM_FLOOR {
            floored[r] = true;
            for v in row.iter_mut() {
                *v += ROW_SUM_FLOOR;
            }
            s = row.iter().sum();
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    (out, floored)
}

/// Backward of [`row_normalize`] given its output `y` and the row sums used.
pub fn row_normalize_backward(y: &Tensor2, sums: &[f64], grad: &Tensor2) -> Tensor2 {
    let (rows, cols) = y.shape();
    let mut out = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        let yr = y.row(r);
        let gr = grad.row(r);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            out.data[r * cols + c] = (gr[c] - dot) / sums[r];
        }
    }
    out
}

/// Row sums that [`row_normalize`] divides by (after the floor is applied).
pub fn row_normalize_sums(x: &Tensor2) -> Vec<f64> {
    (0..x.rows())
        .map(|r| {
            let s: f64 = x.row(r).iter().sum();
            if s < ROW_SUM_FLOOR {
                x.row(r).iter().map(|v| v + ROW_SUM_FLOOR).sum()
            } else {
                s
            }
        })
        .collect()
}
