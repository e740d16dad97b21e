//! Irreducible spherical tensor operators and the labelled Kronecker-product
//! Liouville basis built from them.
//!
//! Single-spin tensors follow the Condon–Shortley convention with unit
//! Frobenius norm: `T(l,l) = (-1)^l (S+)^l / ||(S+)^l||`, lower projections by
//! `T(l,m-1) = [S-, T(l,m)] / sqrt(l(l+1) - m(m-1))`. Product basis states are
//! Kronecker products with spin 0 as the leftmost (slowest) factor, listed
//! lexicographically over per-spin `(l, m)` with `m` ascending inside `l`.

use std::fmt;
use std::str::FromStr;

use crate::error::{domain, parse_err, Error, Result};
use crate::linalg::{commutator, kron, CMat, C64};
use crate::system::SpinSystem;

/// Which single-spin angular momentum operator to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpinOp {
    X,
    Y,
    Z,
    Plus,
    Minus,
}

/// `S+` for a spin of the given multiplicity, states ordered from
/// `m = s` down to `m = -s`.
pub fn raising(multiplicity: usize) -> CMat {
    let s = (multiplicity as f64 - 1.0) / 2.0;
    let mut out = CMat::zeros(multiplicity, multiplicity);
    for i in 1..multiplicity {
        let m = s - i as f64;
        out[(i - 1, i)] = C64::new((s * (s + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
    }
    out
}

/// Single-spin angular momentum matrix.
pub fn single_spin_operator(multiplicity: usize, which: SpinOp) -> CMat {
    let s = (multiplicity as f64 - 1.0) / 2.0;
    match which {
        SpinOp::Plus => raising(multiplicity),
        SpinOp::Minus => raising(multiplicity).adjoint(),
        SpinOp::Z => {
            let d: Vec<f64> = (0..multiplicity).map(|i| s - i as f64).collect();
            CMat::from_real_diag(&d)
        }
        SpinOp::X => {
            let p = raising(multiplicity);
            (&p + &p.adjoint()).scale_real(0.5)
        }
        SpinOp::Y => {
            let p = raising(multiplicity);
            (&p - &p.adjoint()).scale(C64::new(0.0, -0.5))
        }
    }
}

/// Unit-Frobenius-norm irreducible spherical tensor `T(l, m)` for a spin of
/// the given multiplicity.
pub fn ist_operator(multiplicity: usize, l: usize, m: i32) -> Result<CMat> {
    if multiplicity < 2 {
        return Err(domain(format!("multiplicity {multiplicity} is below 2")));
    }
    if l >= multiplicity {
        return Err(domain(format!(
            "rank {l} exceeds the maximum {} for multiplicity {multiplicity}",
            multiplicity - 1
        )));
    }
    if m.unsigned_abs() as usize > l {
        return Err(domain(format!("projection {m} exceeds rank {l}")));
    }
    Ok(tensor_family(multiplicity, l).swap_remove((l as i32 - m) as usize))
}

/// `T(l, l), T(l, l-1), ..., T(l, -l)`.
fn tensor_family(multiplicity: usize, l: usize) -> Vec<CMat> {
    let plus = raising(multiplicity);
    let minus = plus.adjoint();
    let mut top = CMat::identity(multiplicity);
    for _ in 0..l {
        top = top.matmul(&plus);
    }
    let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
    top = top.scale_real(sign / top.frobenius_norm());

    let li = l as f64;
    let mut out = Vec::with_capacity(2 * l + 1);
    out.push(top);
    for m in (-(l as i32) + 1..=l as i32).rev() {
        let mf = m as f64;
        let factor = (li * (li + 1.0) - mf * (mf - 1.0)).sqrt();
        let next = commutator(&minus, out.last().unwrap()).scale_real(1.0 / factor);
        out.push(next);
    }
    out
}

/// Per-spin `(l, m)` components of one product basis state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BasisLabel {
    pub components: Vec<(usize, i32)>,
}

impl BasisLabel {
    pub fn new(components: Vec<(usize, i32)>) -> Self {
        Self { components }
    }

    /// Number of non-unit factors.
    pub fn correlation_order(&self) -> usize {
        self.components.iter().filter(|(l, _)| *l > 0).count()
    }

    /// Sum of projection quantum numbers.
    pub fn coherence_order(&self) -> i32 {
        self.components.iter().map(|(_, m)| m).sum()
    }

    /// The label with every projection negated.
    pub fn flipped(&self) -> Self {
        Self {
            components: self.components.iter().map(|&(l, m)| (l, -m)).collect(),
        }
    }

    pub fn n_spins(&self) -> usize {
        self.components.len()
    }
}

impl fmt::Display for BasisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, m) in &self.components {
            write!(f, "({l},{m})")?;
        }
        Ok(())
    }
}

impl FromStr for BasisLabel {
    type Err = Error;

    /// Parses the `Display` form, e.g. `(1,0)(0,0)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut components = Vec::new();
        let mut rest = s;
        while !rest.is_empty() {
            let body = rest
                .strip_prefix('(')
                .and_then(|r| r.split_once(')'))
                .ok_or_else(|| parse_err(0, format!("malformed basis label {s:?}")))?;
            let (pair, tail) = body;
            let (l, m) = pair
                .split_once(',')
                .ok_or_else(|| parse_err(0, format!("malformed basis label {s:?}")))?;
            let l = l
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(0, format!("bad rank in basis label {s:?}")))?;
            let m = m
                .trim()
                .parse::<i32>()
                .map_err(|_| parse_err(0, format!("bad projection in basis label {s:?}")))?;
            components.push((l, m));
            rest = tail;
        }
        if components.is_empty() {
            return Err(parse_err(0, "empty basis label"));
        }
        Ok(Self { components })
    }
}

/// Position of `(l, m)` in the single-spin ordering.
fn local_index(l: usize, m: i32) -> usize {
    l * l + (l as i32 + m) as usize
}

fn local_label(idx: usize) -> (usize, i32) {
    let l = (idx as f64).sqrt() as usize;
    // guard against sqrt rounding for perfect squares
    let l = if (l + 1) * (l + 1) <= idx { l + 1 } else { l };
    (l, idx as i32 - (l * l) as i32 - l as i32)
}

/// Normalised irreducible spherical tensor product basis of a spin system.
#[derive(Clone, Debug)]
pub struct ProductBasis {
    multiplicities: Vec<usize>,
    labels: Vec<BasisLabel>,
    /// `tensors[k][a]` is the single-spin tensor with local index `a` on spin `k`.
    tensors: Vec<Vec<CMat>>,
    /// Maps the interleaved `(i_k, j_k)` tensor position to the row-major
    /// Hilbert matrix position.
    interleave: Vec<usize>,
}

impl ProductBasis {
    pub fn new(system: &SpinSystem) -> Self {
        Self::from_multiplicities(&system.multiplicities())
            .expect("validated systems have multiplicities of at least 2")
    }

    pub fn from_multiplicities(multiplicities: &[usize]) -> Result<Self> {
        if multiplicities.is_empty() {
            return Err(domain("basis needs at least one spin"));
        }
        if let Some(&n) = multiplicities.iter().find(|&&n| n < 2) {
            return Err(domain(format!("multiplicity {n} is below 2")));
        }
        let tensors: Vec<Vec<CMat>> = multiplicities
            .iter()
            .map(|&n| {
                let mut v = Vec::with_capacity(n * n);
                for l in 0..n {
                    let mut fam = tensor_family(n, l);
                    fam.reverse();
                    v.extend(fam);
                }
                v
            })
            .collect();

        let dim: usize = multiplicities.iter().map(|n| n * n).product();
        let mut labels = Vec::with_capacity(dim);
        for idx in 0..dim {
            let mut rem = idx;
            let mut comps = vec![(0, 0); multiplicities.len()];
            for (k, &n) in multiplicities.iter().enumerate().rev() {
                comps[k] = local_label(rem % (n * n));
                rem /= n * n;
            }
            labels.push(BasisLabel::new(comps));
        }

        let hilbert: usize = multiplicities.iter().product();
        let mut interleave = vec![0usize; dim];
        for (p, slot) in interleave.iter_mut().enumerate() {
            let mut rem = p;
            let mut row = 0;
            let mut col = 0;
            let mut stride = 1;
            for &n in multiplicities.iter().rev() {
                let q = rem % (n * n);
                rem /= n * n;
                row += (q / n) * stride;
                col += (q % n) * stride;
                stride *= n;
            }
            *slot = row * hilbert + col;
        }

        Ok(Self {
            multiplicities: multiplicities.to_vec(),
            labels,
            tensors,
            interleave,
        })
    }

    pub fn multiplicities(&self) -> &[usize] {
        &self.multiplicities
    }

    pub fn n_spins(&self) -> usize {
        self.multiplicities.len()
    }

    /// Liouville-space dimension.
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn hilbert_dim(&self) -> usize {
        self.multiplicities.iter().product()
    }

    pub fn labels(&self) -> &[BasisLabel] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &BasisLabel {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &BasisLabel) -> Option<usize> {
        if label.components.len() != self.multiplicities.len() {
            return None;
        }
        let mut idx = 0;
        for (&(l, m), &n) in label.components.iter().zip(&self.multiplicities) {
            if l >= n || m.unsigned_abs() as usize > l {
                return None;
            }
            idx = idx * n * n + local_index(l, m);
        }
        Some(idx)
    }

    /// Single-spin tensor `T(l, m)` of spin `k` as used by this basis.
    pub fn single_spin_tensor(&self, spin: usize, l: usize, m: i32) -> &CMat {
        &self.tensors[spin][local_index(l, m)]
    }

    /// Hilbert-space matrix of basis state `index`.
    pub fn operator(&self, index: usize) -> CMat {
        let label = &self.labels[index];
        let mut out = CMat::identity(1);
        for (k, &(l, m)) in label.components.iter().enumerate() {
            out = kron(&out, &self.tensors[k][local_index(l, m)]);
        }
        out
    }

    /// Expansion coefficients `c_a = Tr(B_a† X)` of a Hilbert-space matrix.
    pub fn coefficients(&self, op: &CMat) -> Vec<C64> {
        let h = self.hilbert_dim();
        assert_eq!((op.rows(), op.cols()), (h, h), "operator has wrong dimension");
        let data = op.as_slice();
        let mut x: Vec<C64> = self.interleave.iter().map(|&p| data[p]).collect();
        for k in 0..self.n_spins() {
            x = self.mode_transform(&x, k, true);
        }
        x
    }

    /// Hilbert-space matrix `Σ c_a B_a`.
    pub fn matrix(&self, coefficients: &[C64]) -> CMat {
        assert_eq!(coefficients.len(), self.dim(), "coefficient vector has wrong length");
        let mut x = coefficients.to_vec();
        for k in 0..self.n_spins() {
            x = self.mode_transform(&x, k, false);
        }
        let h = self.hilbert_dim();
        let mut out = vec![C64::new(0.0, 0.0); h * h];
        for (&p, v) in self.interleave.iter().zip(x) {
            out[p] = v;
        }
        CMat::from_vec(h, h, out)
    }

    /// Applies the single-spin change of basis along mode `k`; `forward`
    /// maps matrix elements to tensor coefficients.
    fn mode_transform(&self, x: &[C64], k: usize, forward: bool) -> Vec<C64> {
        let n = self.multiplicities[k];
        let n2 = n * n;
        let inner: usize = self.multiplicities[k + 1..].iter().map(|m| m * m).product();
        let outer = x.len() / (n2 * inner);
        let tensors = &self.tensors[k];
        let mut out = vec![C64::new(0.0, 0.0); x.len()];
        for o in 0..outer {
            let base = o * n2 * inner;
            for (a, t) in tensors.iter().enumerate() {
                let t = t.as_slice();
                for (q, &tq) in t.iter().enumerate() {
                    if tq.re == 0.0 && tq.im == 0.0 {
                        continue;
                    }
                    // forward: out[a] += conj(T_a[q]) x[q]; backward: out[q] += T_a[q] x[a]
                    let (dst, src, w) = if forward { (a, q, tq.conj()) } else { (q, a, tq) };
                    let d0 = base + dst * inner;
                    let s0 = base + src * inner;
                    for i in 0..inner {
                        out[d0 + i] += w * x[s0 + i];
                    }
                }
            }
        }
        out
    }
}

/// `S_which` of one spin embedded into the full Hilbert space.
pub fn spin_operator(system: &SpinSystem, spin: usize, which: SpinOp) -> Result<CMat> {
    embedded_spin_operator(&system.multiplicities(), spin, which)
}

pub fn embedded_spin_operator(multiplicities: &[usize], spin: usize, which: SpinOp) -> Result<CMat> {
    if spin >= multiplicities.len() {
        return Err(domain(format!(
            "spin index {spin} out of range for {} spins",
            multiplicities.len()
        )));
    }
    let mut out = CMat::identity(1);
    for (k, &n) in multiplicities.iter().enumerate() {
        let factor = if k == spin {
            single_spin_operator(n, which)
        } else {
            CMat::identity(n)
        };
        out = kron(&out, &factor);
    }
    Ok(out)
}

pub fn correlation_order(label: &BasisLabel) -> usize {
    label.correlation_order()
}

pub fn coherence_order(label: &BasisLabel) -> i32 {
    label.coherence_order()
}
