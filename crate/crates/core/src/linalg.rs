//! Small dense complex matrices.
//!
//! Hilbert-space operators of the systems handled here are at most a few
//! hundred rows, so a plain row-major buffer with allocation-free kernels
//! for the hot loops is all that is needed. The matrix exponential uses
//! scaling and squaring with diagonal Padé approximants (Higham 2005).

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Row-major dense complex matrix.
#[derive(Clone, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    pub fn from_diag(diag: &[C64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        let d: Vec<C64> = diag.iter().map(|&x| C64::new(x, 0.0)).collect();
        Self::from_diag(&d)
    }

    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j].conj();
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * factor).collect(),
        }
    }

    pub fn scale_real(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * factor).collect(),
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &CMat, factor: C64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += y * factor;
        }
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols))
            .map(|i| self.data[i * self.cols + i])
            .sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        let mut best = 0.0_f64;
        for j in 0..self.cols {
            let s: f64 = (0..self.rows).map(|i| self.data[i * self.cols + j].norm()).sum();
            best = best.max(s);
        }
        best
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.re.is_finite() && x.im.is_finite())
    }

    pub fn matmul(&self, other: &CMat) -> CMat {
        let mut out = CMat::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        out
    }

    /// Applies the matrix to a vector.
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let row = &self.data[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(v).map(|(&a, &b)| a * b).sum()
            })
            .collect()
    }

    /// Copies `block` into `self` with its top-left corner at `(row, col)`.
    pub fn set_block(&mut self, row: usize, col: usize, block: &CMat) {
        assert!(row + block.rows <= self.rows && col + block.cols <= self.cols);
        for i in 0..block.rows {
            let dst = (row + i) * self.cols + col;
            self.data[dst..dst + block.cols]
                .copy_from_slice(&block.data[i * block.cols..(i + 1) * block.cols]);
        }
    }

    pub fn block(&self, row: usize, col: usize, rows: usize, cols: usize) -> CMat {
        assert!(row + rows <= self.rows && col + cols <= self.cols);
        let mut out = CMat::zeros(rows, cols);
        for i in 0..rows {
            let src = (row + i) * self.cols + col;
            out.data[i * cols..(i + 1) * cols].copy_from_slice(&self.data[src..src + cols]);
        }
        out
    }
}

impl fmt::Debug for CMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                let z = self.data[i * self.cols + j];
                write!(f, "{:+.6}{:+.6}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &CMat {
    type Output = CMat;
    fn add(self, rhs: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl Sub for &CMat {
    type Output = CMat;
    fn sub(self, rhs: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

impl AddAssign<&CMat> for CMat {
    fn add_assign(&mut self, rhs: &CMat) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (x, &y) in self.data.iter_mut().zip(&rhs.data) {
            *x += y;
        }
    }
}

impl Neg for &CMat {
    type Output = CMat;
    fn neg(self) -> CMat {
        self.scale_real(-1.0)
    }
}

impl Mul for &CMat {
    type Output = CMat;
    fn mul(self, rhs: &CMat) -> CMat {
        self.matmul(rhs)
    }
}

/// `out = a * b`, overwriting `out`.
pub fn matmul_into(a: &CMat, b: &CMat, out: &mut CMat) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((out.rows, out.cols), (a.rows, b.cols));
    let (n, m) = (b.rows, b.cols);
    out.data.fill(ZERO);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for k in 0..n {
            let aik = a.data[i * n + k];
            if aik == ZERO {
                continue;
            }
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut out = CMat::zeros(rows, cols);
    for ia in 0..a.rows {
        for ja in 0..a.cols {
            let x = a.data[ia * a.cols + ja];
            if x == ZERO {
                continue;
            }
            for ib in 0..b.rows {
                let r = ia * b.rows + ib;
                for jb in 0..b.cols {
                    out.data[r * cols + ja * b.cols + jb] = x * b.data[ib * b.cols + jb];
                }
            }
        }
    }
    out
}

/// Hilbert–Schmidt scalar product `Tr(a† b)`.
pub fn inner(a: &CMat, b: &CMat) -> C64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    a.data.iter().zip(&b.data).map(|(x, &y)| x.conj() * y).sum()
}

/// `[a, b] = ab - ba`
pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    &a.matmul(b) - &b.matmul(a)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &CMat, b: &CMat) -> Result<CMat> {
    if !a.is_square() || a.rows != b.rows {
        return Err(Error::Domain(format!(
            "cannot solve a {}x{} system with a {}x{} right-hand side",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = a.rows;
    let m = b.cols;
    let mut lu = a.data.clone();
    let mut x = b.data.clone();
    for col in 0..n {
        let (pivot, pivot_abs) = (col..n)
            .map(|r| (r, lu[r * n + col].norm()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs == 0.0 || !pivot_abs.is_finite() {
            return Err(Error::Numeric("singular matrix in linear solve".into()));
        }
        if pivot != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot * n + j);
            }
            for j in 0..m {
                x.swap(col * m + j, pivot * m + j);
            }
        }
        let inv = ONE / lu[col * n + col];
        for r in col + 1..n {
            let factor = lu[r * n + col] * inv;
            if factor == ZERO {
                continue;
            }
            for j in col..n {
                let v = lu[col * n + j];
                lu[r * n + j] -= factor * v;
            }
            for j in 0..m {
                let v = x[col * m + j];
                x[r * m + j] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        let inv = ONE / lu[col * n + col];
        for j in 0..m {
            let mut acc = x[col * m + j];
            for k in col + 1..n {
                acc -= lu[col * n + k] * x[k * m + j];
            }
            x[col * m + j] = acc * inv;
        }
    }
    Ok(CMat::from_vec(n, m, x))
}

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Backward-error bounds for double precision, Higham (2005) table 2.3.
const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

/// Matrix exponential by scaling and squaring.
///
/// Low-norm inputs use the cheapest diagonal Padé approximant whose
/// backward error bound holds; everything else is scaled by `2^-s` from the
/// 1-norm until the order-13 approximant applies, then squared back.
///
/// Panics if `a` is not square.
pub fn expm(a: &CMat) -> CMat {
    assert!(a.is_square(), "expm requires a square matrix");
    let n = a.rows;
    if n == 0 {
        return CMat::zeros(0, 0);
    }
    let norm = a.norm1();
    if norm == 0.0 {
        return CMat::identity(n);
    }
    let a2 = a.matmul(a);
    if norm <= THETA_3 {
        return pade_low(a, &a2, &PADE_3);
    }
    if norm <= THETA_5 {
        return pade_low(a, &a2, &PADE_5);
    }
    if norm <= THETA_7 {
        return pade_low(a, &a2, &PADE_7);
    }
    if norm <= THETA_9 {
        return pade_low(a, &a2, &PADE_9);
    }
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let (a_s, a2_s) = if s > 0 {
        let f = 2f64.powi(-s);
        (a.scale_real(f), a2.scale_real(f * f))
    } else {
        (a.clone(), a2)
    };
    let mut r = pade_13(&a_s, &a2_s);
    let mut tmp = CMat::zeros(n, n);
    for _ in 0..s {
        matmul_into(&r, &r, &mut tmp);
        std::mem::swap(&mut r, &mut tmp);
    }
    r
}

fn pade_low(a: &CMat, a2: &CMat, b: &[f64]) -> CMat {
    let n = a.rows;
    let order = b.len() - 1;
    let mut powers = vec![CMat::identity(n), a2.clone()];
    while 2 * (powers.len() - 1) < order - 1 {
        let next = powers.last().unwrap().matmul(a2);
        powers.push(next);
    }
    let mut u_inner = CMat::zeros(n, n);
    let mut v = CMat::zeros(n, n);
    for (j, p) in powers.iter().enumerate() {
        u_inner.add_scaled(p, C64::new(b[2 * j + 1], 0.0));
        v.add_scaled(p, C64::new(b[2 * j], 0.0));
    }
    let u = a.matmul(&u_inner);
    pade_quotient(&u, &v)
}

fn pade_13(a: &CMat, a2: &CMat) -> CMat {
    let n = a.rows;
    let b = |k: usize| C64::new(PADE_13[k], 0.0);
    let a4 = a2.matmul(a2);
    let a6 = a4.matmul(a2);
    let ident = CMat::identity(n);

    let mut w1 = a6.scale(b(13));
    w1.add_scaled(&a4, b(11));
    w1.add_scaled(a2, b(9));
    let mut w = a6.matmul(&w1);
    w.add_scaled(&a6, b(7));
    w.add_scaled(&a4, b(5));
    w.add_scaled(a2, b(3));
    w.add_scaled(&ident, b(1));
    let u = a.matmul(&w);

    let mut z1 = a6.scale(b(12));
    z1.add_scaled(&a4, b(10));
    z1.add_scaled(a2, b(8));
    let mut v = a6.matmul(&z1);
    v.add_scaled(&a6, b(6));
    v.add_scaled(&a4, b(4));
    v.add_scaled(a2, b(2));
    v.add_scaled(&ident, b(0));
    pade_quotient(&u, &v)
}

fn pade_quotient(u: &CMat, v: &CMat) -> CMat {
    // (V - U) X = (V + U); V - U is well conditioned inside the theta bounds
    solve(&(v - u), &(v + u)).expect("Padé denominator is nonsingular for finite input")
}

/// Returns `(exp(a), L(a, e))` where `L` is the Fréchet derivative of the
/// exponential at `a` in direction `e`, read off the exponential of the
/// block upper-triangular generator `[[a, e], [0, a]]`.
pub fn expm_with_derivative(a: &CMat, e: &CMat) -> (CMat, CMat) {
    assert!(a.is_square() && e.is_square() && a.rows == e.rows);
    let n = a.rows;
    let mut aug = CMat::zeros(2 * n, 2 * n);
    aug.set_block(0, 0, a);
    aug.set_block(0, n, e);
    aug.set_block(n, n, a);
    let big = expm(&aug);
    (big.block(0, 0, n, n), big.block(0, n, n, n))
}

/// Spectral form of `exp(-i t H)` for Hermitian `H`. Gives the propagator
/// and exact directional derivatives without forming augmented matrices.
#[derive(Clone, Debug)]
pub struct HermitianExp {
    vectors: CMat,
    values: Vec<f64>,
    t: f64,
}

impl HermitianExp {
    pub fn new(h: &CMat, t: f64) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::Domain("Hermitian exponential needs a square matrix".into()));
        }
        if !h.is_finite() || !t.is_finite() {
            return Err(Error::Numeric("non-finite Hamiltonian or time step".into()));
        }
        let n = h.rows;
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (h[(i, j)] + h[(j, i)].conj()));
        let eig = m.symmetric_eigen();
        let vectors = CMat::from_fn(n, n, |i, j| eig.eigenvectors[(i, j)]);
        Ok(Self {
            vectors,
            values: eig.eigenvalues.iter().copied().collect(),
            t,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.values
    }

    /// `V diag(e^{-i t λ}) V†`
    pub fn propagator(&self) -> CMat {
        let n = self.values.len();
        let v = &self.vectors;
        let phases: Vec<C64> = self.values.iter().map(|&l| C64::from_polar(1.0, -self.t * l)).collect();
        CMat::from_fn(n, n, |i, j| (0..n).map(|k| v[(i, k)] * phases[k] * v[(j, k)].conj()).sum())
    }

    /// `d/dε exp(-i t (H + ε K))` at `ε = 0`.
    pub fn derivative(&self, k: &CMat) -> CMat {
        let n = self.values.len();
        let v = &self.vectors;
        let mut kk = v.adjoint().matmul(k).matmul(v);
        for i in 0..n {
            for j in 0..n {
                let (li, lj) = (self.values[i], self.values[j]);
                // divided difference of exp at -i t λi, -i t λj, times -i t
                let phase = C64::from_polar(1.0, -0.5 * self.t * (li + lj));
                let w = phase * sinc(0.5 * self.t * (li - lj)) * C64::new(0.0, -self.t);
                kk[(i, j)] *= w;
            }
        }
        v.matmul(&kk).matmul(&v.adjoint())
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}
