//! Row-major dense matrices and a plain-text format for fixed test vectors.
//!
//! Text format: an optional run of `#` comment and blank lines, a header
//! line `rows cols`, then `rows` lines of `cols` whitespace-separated
//! numbers. Comments and blank lines may appear anywhere.

use std::fmt::Write as _;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("matrix text, line {line}: {message}")]
pub struct MatrixParseError {
    pub line: usize,
    pub message: String,
}

/// Largest accepted `rows * cols` in the text format.
pub const MAX_TEXT_ELEMENTS: usize = 1 << 24;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    /// Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · wᵀ` for `self: b×k`, `w: o×k`.
    pub fn matmul_bt(&self, w: &Matrix) -> Matrix {
        assert_eq!(self.cols, w.cols, "inner dimensions");
        let mut out = Matrix::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for o in 0..w.rows {
                let mut s = 0.0;
                for (x, y) in a.iter().zip(w.row(o)) {
                    s += x * y;
                }
                out.data[i * w.rows + o] = s;
            }
        }
        out
    }

    /// `self · w` for `self: b×o`, `w: o×k`.
    pub fn matmul(&self, w: &Matrix) -> Matrix {
        assert_eq!(self.cols, w.rows, "inner dimensions");
        let mut out = Matrix::zeros(self.rows, w.cols);
        for i in 0..self.rows {
            for k in 0..w.cols {
                let mut s = 0.0;
                for o in 0..self.cols {
                    s += self.get(i, o) * w.get(o, k);
                }
                out.data[i * w.cols + k] = s;
            }
        }
        out
    }

    /// `selfᵀ · a` for `self: b×o`, `a: b×k`.
    pub fn tmatmul(&self, a: &Matrix) -> Matrix {
        assert_eq!(self.rows, a.rows, "outer dimensions");
        let mut out = Matrix::zeros(self.cols, a.cols);
        for o in 0..self.cols {
            for k in 0..a.cols {
                let mut s = 0.0;
                for i in 0..self.rows {
                    s += self.get(i, o) * a.get(i, k);
                }
                out.data[o * a.cols + k] = s;
            }
        }
        out
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|c| {
                let mut s = 0.0;
                for r in 0..self.rows {
                    s += self.get(r, c);
                }
                s
            })
            .collect()
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.cols, "row vector length");
        for r in 0..self.rows {
            for (x, b) in self.data[r * self.cols..(r + 1) * self.cols].iter_mut().zip(v) {
                *x += b;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "shapes");
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "shapes");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * range.len());
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Matrix {
            rows: self.rows,
            cols: range.len(),
            data,
        }
    }

    /// Writes `block` into columns `at..at + block.cols()`.
    pub fn put_cols(&mut self, at: usize, block: &Matrix) {
        assert_eq!(self.rows, block.rows, "row counts");
        assert!(at + block.cols <= self.cols, "column block out of range");
        for r in 0..self.rows {
            self.data[r * self.cols + at..r * self.cols + at + block.cols].copy_from_slice(block.row(r));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Parses the plain-text format.
    pub fn parse_text(text: &str) -> Result<Matrix, MatrixParseError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let err = |line: usize, message: String| MatrixParseError { line, message };

        let (hline, header) = lines
            .next()
            .ok_or_else(|| err(0, "missing `rows cols` header".into()))?;
        let dims: Vec<&str> = header.split_whitespace().collect();
        let [r, c] = dims.as_slice() else {
            return Err(err(hline, format!("header needs 2 numbers, found {}", dims.len())));
        };
        let parse_dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| err(hline, format!("bad dimension `{s}`: {e}")))
        };
        let (rows, cols) = (parse_dim(r)?, parse_dim(c)?);
        if cols == 0 && rows > 0 {
            return Err(err(hline, "rows cannot be empty".into()));
        }
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n <= MAX_TEXT_ELEMENTS)
            .ok_or_else(|| err(hline, format!("{rows}x{cols} matrix is too large")))?;

        let mut data = Vec::with_capacity(len);
        let mut last = hline;
        for _ in 0..rows {
            let (line, body) = lines.next().ok_or_else(|| {
                err(
                    last + 1,
                    format!("expected {rows} rows, found {}", data.len() / cols.max(1)),
                )
            })?;
            last = line;
            let before = data.len();
            for tok in body.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| err(line, format!("bad number `{tok}`")))?;
                if !v.is_finite() {
                    return Err(err(line, format!("non-finite value `{tok}`")));
                }
                data.push(v);
            }
            let got = data.len() - before;
            if got != cols {
                return Err(err(line, format!("expected {cols} values, found {got}")));
            }
        }
        if let Some((line, _)) = lines.next() {
            return Err(err(line, "unexpected data after last row".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Renders the plain-text format; values round-trip exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.rows, self.cols);
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise [`rel_error`] of two equally sized slices.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "lengths");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_error(x, y, floor))
        .fold(0.0, f64::max)
}
