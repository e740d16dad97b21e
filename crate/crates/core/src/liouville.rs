//! Hamiltonians, commutation superoperators and time propagation.
//!
//! Frequencies are given in Hz and converted to rad/s here. Controls are
//! piecewise constant: during step `n` the Hamiltonian is
//! `H0 + Σ_k 2π·power·c_k[n]·C_k`.
//!
//! Without relaxation the Liouville-space step propagator
//! `exp(-i L dt)` acts as `ρ ↦ U ρ U†` with `U = exp(-i H dt)`, so
//! [`propagate`] works with Hilbert-space matrices and converts to tensor
//! coefficients at each recorded step. [`propagate_liouville`] builds the
//! superoperators explicitly and is kept as the reference route.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::basis::{embedded_spin_operator, ProductBasis, SpinOp};
use crate::error::{domain, parse_err, Error, Result};
use crate::linalg::{commutator, expm, inner, CMat, C64, ZERO};
use crate::system::{CouplingModel, SpinSystem};

/// A Liouville-space state: coefficients over a [`ProductBasis`].
#[derive(Clone, Debug)]
pub struct StateVector {
    basis: Arc<ProductBasis>,
    coefficients: Vec<C64>,
}

impl StateVector {
    pub fn new(basis: Arc<ProductBasis>, coefficients: Vec<C64>) -> Result<Self> {
        if coefficients.len() != basis.dim() {
            return Err(domain(format!(
                "state has {} coefficients, basis dimension is {}",
                coefficients.len(),
                basis.dim()
            )));
        }
        if coefficients.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Numeric("state has non-finite coefficients".into()));
        }
        Ok(Self {
            basis,
            coefficients,
        })
    }

    /// The state with unit coefficient on one basis element.
    pub fn basis_state(basis: Arc<ProductBasis>, index: usize) -> Self {
        let mut coefficients = vec![ZERO; basis.dim()];
        coefficients[index] = C64::new(1.0, 0.0);
        Self {
            basis,
            coefficients,
        }
    }

    pub fn from_matrix(basis: Arc<ProductBasis>, op: &CMat) -> Result<Self> {
        let h = basis.hilbert_dim();
        if op.rows() != h || op.cols() != h {
            return Err(domain(format!(
                "operator is {}x{}, Hilbert dimension is {h}",
                op.rows(),
                op.cols()
            )));
        }
        let coefficients = basis.coefficients(op);
        Self::new(basis, coefficients)
    }

    pub fn basis(&self) -> &Arc<ProductBasis> {
        &self.basis
    }

    pub fn coefficients(&self) -> &[C64] {
        &self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<C64> {
        self.coefficients
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coefficients)
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(domain("cannot normalise the zero state"));
        }
        Ok(Self {
            basis: self.basis.clone(),
            coefficients: self.coefficients.iter().map(|c| c / n).collect(),
        })
    }

    /// `⟨self|other⟩`
    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        if self.dim() != other.dim() {
            return Err(domain(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(dot(&self.coefficients, &other.coefficients))
    }

    pub fn to_matrix(&self) -> CMat {
        self.basis.matrix(&self.coefficients)
    }

    pub fn scaled(&self, factor: C64) -> Self {
        Self {
            basis: self.basis.clone(),
            coefficients: self.coefficients.iter().map(|&c| c * factor).collect(),
        }
    }
}

pub(crate) fn norm(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// `Σ conj(a_i) b_i`
pub(crate) fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, &y)| x.conj() * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

/// One control channel: an isotope-wide `Lx` or `Ly`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Channel {
    pub isotope: String,
    pub axis: Axis,
}

impl Channel {
    pub fn new(isotope: &str, axis: Axis) -> Self {
        Self {
            isotope: isotope.to_string(),
            axis,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axis = match self.axis {
            Axis::X => "x",
            Axis::Y => "y",
        };
        write!(f, "{}:{}", self.isotope, axis)
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (iso, axis) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| parse_err(0, format!("channel {s:?} is not of the form isotope:axis")))?;
        let axis = match axis.trim() {
            "x" | "X" => Axis::X,
            "y" | "Y" => Axis::Y,
            other => return Err(parse_err(0, format!("unknown channel axis {other:?}"))),
        };
        if iso.trim().is_empty() {
            return Err(parse_err(0, format!("channel {s:?} has an empty isotope")));
        }
        Ok(Channel::new(iso.trim(), axis))
    }
}

/// Piecewise-constant control amplitudes on a uniform time grid.
///
/// Amplitudes are dimensionless multipliers of `power_hz`, stored per
/// channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSet {
    dt: f64,
    power_hz: f64,
    channels: Vec<Channel>,
    amplitudes: Vec<Vec<f64>>,
}

impl ControlSet {
    pub fn new(dt: f64, power_hz: f64, channels: Vec<Channel>, amplitudes: Vec<Vec<f64>>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(domain(format!("time step must be positive, got {dt}")));
        }
        if !power_hz.is_finite() {
            return Err(domain("nominal power is not finite"));
        }
        if channels.len() != amplitudes.len() {
            return Err(domain(format!(
                "{} channels but {} amplitude rows",
                channels.len(),
                amplitudes.len()
            )));
        }
        let n_steps = amplitudes.first().map_or(0, |a| a.len());
        if n_steps == 0 {
            return Err(domain("a control set needs at least one time step"));
        }
        if amplitudes.iter().any(|a| a.len() != n_steps) {
            return Err(domain("amplitude rows have different lengths"));
        }
        if amplitudes.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite control amplitude".into()));
        }
        Ok(Self {
            dt,
            power_hz,
            channels,
            amplitudes,
        })
    }

    pub fn zeros(dt: f64, power_hz: f64, channels: Vec<Channel>, n_steps: usize) -> Result<Self> {
        let amplitudes = vec![vec![0.0; n_steps]; channels.len()];
        if channels.is_empty() {
            return Err(domain("a control set needs at least one channel"));
        }
        Self::new(dt, power_hz, channels, amplitudes)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn power_hz(&self) -> f64 {
        self.power_hz
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_steps(&self) -> usize {
        self.amplitudes[0].len()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.n_steps() as f64
    }

    /// Amplitude rows, one per channel.
    pub fn amplitudes(&self) -> &[Vec<f64>] {
        &self.amplitudes
    }

    pub fn amplitude(&self, channel: usize, step: usize) -> f64 {
        self.amplitudes[channel][step]
    }

    /// Replaces the amplitudes, keeping grid and channels.
    pub fn with_amplitudes(&self, amplitudes: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.dt, self.power_hz, self.channels.clone(), amplitudes)
    }

    /// Short stable digest of the control data.
    pub fn fingerprint(&self) -> String {
        let mut text = format!("dt={:?};power={:?};", self.dt, self.power_hz);
        for (ch, row) in self.channels.iter().zip(&self.amplitudes) {
            text.push_str(&format!("{ch}:"));
            for a in row {
                text.push_str(&format!("{a:?},"));
            }
        }
        digest(&text)
    }
}

pub(crate) fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Digest identifying the system and controls a trajectory came from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub system: String,
    pub controls: String,
}

/// Time-ordered states on a uniform grid.
#[derive(Clone, Debug)]
pub struct Trajectory {
    basis: Arc<ProductBasis>,
    times: Vec<f64>,
    states: Vec<Vec<C64>>,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn new(basis: Arc<ProductBasis>, times: Vec<f64>, states: Vec<Vec<C64>>) -> Result<Self> {
        if times.is_empty() || times.len() != states.len() {
            return Err(domain(format!(
                "{} time points for {} states",
                times.len(),
                states.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(domain("trajectory times must be strictly increasing"));
        }
        if let Some(bad) = states.iter().position(|s| s.len() != basis.dim()) {
            return Err(domain(format!(
                "state {bad} has {} coefficients, basis dimension is {}",
                states[bad].len(),
                basis.dim()
            )));
        }
        Ok(Self {
            basis,
            times,
            states,
            provenance: Provenance::default(),
        })
    }

    pub fn basis(&self) -> &Arc<ProductBasis> {
        &self.basis
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<C64>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, index: usize) -> StateVector {
        StateVector {
            basis: self.basis.clone(),
            coefficients: self.states[index].clone(),
        }
    }

    pub fn last(&self) -> StateVector {
        self.state(self.len() - 1)
    }

    /// Applies `f` to every state, keeping the grid.
    pub fn map_states(&self, mut f: impl FnMut(&[C64]) -> Vec<C64>) -> Result<Self> {
        let states = self.states.iter().map(|s| f(s)).collect();
        let mut out = Self::new(self.basis.clone(), self.times.clone(), states)?;
        out.provenance = self.provenance.clone();
        Ok(out)
    }
}

impl SpinSystem {
    /// Short stable digest of the system parameters.
    pub fn fingerprint(&self) -> String {
        digest(&format!(
            "{:?}|{:?}|{:?}",
            self.spins(),
            self.couplings(),
            self.quadrupolar()
        ))
    }
}

/// Time-independent Hamiltonian in rad/s: Zeeman offsets, scalar couplings
/// and quadrupolar terms `(2π ω_q / 3)[(3Sz² − S²) + η(Sx² − Sy²)]`.
pub fn drift_hamiltonian(system: &SpinSystem) -> CMat {
    let mults = system.multiplicities();
    let n = system.hilbert_dim();
    let op = |k: usize, w: SpinOp| embedded_spin_operator(&mults, k, w).expect("index validated");
    let mut h = CMat::zeros(n, n);
    for (k, spin) in system.spins().iter().enumerate() {
        if spin.offset_hz != 0.0 {
            h.add_scaled(&op(k, SpinOp::Z), C64::new(2.0 * PI * spin.offset_hz, 0.0));
        }
    }
    for c in system.couplings() {
        let w = C64::new(2.0 * PI * c.j_hz, 0.0);
        let mut term = op(c.i, SpinOp::Z).matmul(&op(c.j, SpinOp::Z));
        if system.effective_model(c) == CouplingModel::Strong {
            term += &op(c.i, SpinOp::X).matmul(&op(c.j, SpinOp::X));
            term += &op(c.i, SpinOp::Y).matmul(&op(c.j, SpinOp::Y));
        }
        h.add_scaled(&term, w);
    }
    for q in system.quadrupolar() {
        let m = mults[q.spin] as f64;
        let s = (m - 1.0) / 2.0;
        let sz = op(q.spin, SpinOp::Z);
        let sx = op(q.spin, SpinOp::X);
        let sy = op(q.spin, SpinOp::Y);
        let mut term = sz.matmul(&sz).scale_real(3.0);
        term.add_scaled(&CMat::identity(n), C64::new(-s * (s + 1.0), 0.0));
        term.add_scaled(&sx.matmul(&sx), C64::new(q.eta, 0.0));
        term.add_scaled(&sy.matmul(&sy), C64::new(-q.eta, 0.0));
        h.add_scaled(&term, C64::new(2.0 * PI * q.omega_q_hz / 3.0, 0.0));
    }
    h
}

/// Control operators `Σ_{spins of isotope} S_x` (or `S_y`), one per channel.
pub fn control_operators(system: &SpinSystem, channels: &[Channel]) -> Result<Vec<CMat>> {
    let mults = system.multiplicities();
    let n = system.hilbert_dim();
    channels
        .iter()
        .map(|ch| {
            if !system.has_isotope(&ch.isotope) {
                return Err(domain(format!(
                    "channel {ch} addresses isotope {} which is not in the system",
                    ch.isotope
                )));
            }
            let which = match ch.axis {
                Axis::X => SpinOp::X,
                Axis::Y => SpinOp::Y,
            };
            let mut out = CMat::zeros(n, n);
            for (k, s) in system.spins().iter().enumerate() {
                if s.isotope == ch.isotope {
                    out += &embedded_spin_operator(&mults, k, which)?;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Superoperator of `ρ ↦ [H, ρ]` in the tensor basis:
/// `L[a][b] = Tr(B_a† [H, B_b])`.
pub fn commutation_superoperator(basis: &ProductBasis, h: &CMat) -> Result<CMat> {
    let n = basis.hilbert_dim();
    if h.rows() != n || h.cols() != n {
        return Err(domain(format!(
            "Hamiltonian is {}x{}, Hilbert dimension is {n}",
            h.rows(),
            h.cols()
        )));
    }
    let d = basis.dim();
    let mut out = CMat::zeros(d, d);
    for b in 0..d {
        let col = basis.coefficients(&commutator(h, &basis.operator(b)));
        for (a, v) in col.into_iter().enumerate() {
            out[(a, b)] = v;
        }
    }
    Ok(out)
}

/// `exp(-i L dt)`
pub fn step_propagator(l: &CMat, dt: f64) -> Result<CMat> {
    if !l.is_square() {
        return Err(domain("generator must be square"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(domain(format!("time step must be positive, got {dt}")));
    }
    if !l.is_finite() {
        return Err(Error::Numeric("generator has non-finite entries".into()));
    }
    let p = expm(&l.scale(C64::new(0.0, -dt)));
    if !p.is_finite() {
        return Err(Error::Numeric("propagator overflowed".into()));
    }
    Ok(p)
}

/// Drift and control operators of a system, prepared once for repeated
/// step-Hamiltonian assembly.
#[derive(Clone, Debug)]
pub struct Generators {
    pub drift: CMat,
    pub controls: Vec<CMat>,
    /// `2π · nominal power`, rad/s per unit amplitude.
    pub control_scale: f64,
}

impl Generators {
    pub fn new(system: &SpinSystem, controls: &ControlSet) -> Result<Self> {
        Ok(Self {
            drift: drift_hamiltonian(system),
            controls: control_operators(system, controls.channels())?,
            control_scale: 2.0 * PI * controls.power_hz(),
        })
    }

    /// Hamiltonian during one step for the given per-channel amplitudes.
    pub fn hamiltonian(&self, amplitudes: impl IntoIterator<Item = f64>) -> CMat {
        let mut h = self.drift.clone();
        for (op, a) in self.controls.iter().zip(amplitudes) {
            if a != 0.0 {
                h.add_scaled(op, C64::new(self.control_scale * a, 0.0));
            }
        }
        h
    }
}

fn check_inputs(system: &SpinSystem, rho0: &StateVector) -> Result<()> {
    if rho0.basis().multiplicities() != system.multiplicities().as_slice() {
        return Err(domain("initial state belongs to a different basis"));
    }
    Ok(())
}

fn time_grid(controls: &ControlSet) -> Vec<f64> {
    (0..=controls.n_steps())
        .map(|n| n as f64 * controls.dt())
        .collect()
}

/// Propagates `rho0` through every control step and returns all
/// `n_steps + 1` states.
///
/// Steps whose amplitudes repeat an earlier step bit for bit reuse its
/// propagator.
pub fn propagate(system: &SpinSystem, controls: &ControlSet, rho0: &StateVector) -> Result<Trajectory> {
    check_inputs(system, rho0)?;
    let gens = Generators::new(system, controls)?;
    let basis = rho0.basis().clone();
    let dt = controls.dt();

    let mut cache: HashMap<Vec<u64>, CMat> = HashMap::new();
    let mut rho = rho0.to_matrix();
    let mut states = Vec::with_capacity(controls.n_steps() + 1);
    states.push(rho0.coefficients().to_vec());
    for n in 0..controls.n_steps() {
        let amps: Vec<f64> = (0..controls.n_channels()).map(|k| controls.amplitude(k, n)).collect();
        let key: Vec<u64> = amps.iter().map(|a| a.to_bits()).collect();
        let u = match cache.get(&key) {
            Some(u) => u,
            None => {
                let h = gens.hamiltonian(amps.iter().copied());
                let u = step_propagator(&h, dt)?;
                cache.entry(key).or_insert(u)
            }
        };
        rho = u.matmul(&rho).matmul(&u.adjoint());
        states.push(basis.coefficients(&rho));
    }
    let mut traj = Trajectory::new(basis, time_grid(controls), states)?;
    traj.provenance = Provenance {
        system: system.fingerprint(),
        controls: controls.fingerprint(),
    };
    Ok(traj)
}

/// Reference propagation with explicit Liouville-space superoperators.
/// Cost grows with the square of the Liouville dimension; meant for small
/// systems and cross-checks.
pub fn propagate_liouville(
    system: &SpinSystem,
    controls: &ControlSet,
    rho0: &StateVector,
) -> Result<Trajectory> {
    check_inputs(system, rho0)?;
    let gens = Generators::new(system, controls)?;
    let basis = rho0.basis().clone();
    let drift = commutation_superoperator(&basis, &gens.drift)?;
    let ctrl = gens
        .controls
        .iter()
        .map(|c| commutation_superoperator(&basis, c))
        .collect::<Result<Vec<_>>>()?;
    let mut rho = rho0.coefficients().to_vec();
    let mut states = vec![rho.clone()];
    for n in 0..controls.n_steps() {
        let mut l = drift.clone();
        for (k, op) in ctrl.iter().enumerate() {
            let a = controls.amplitude(k, n);
            if a != 0.0 {
                l.add_scaled(op, C64::new(gens.control_scale * a, 0.0));
            }
        }
        let p = step_propagator(&l, controls.dt())?;
        rho = p.apply(&rho);
        states.push(rho.clone());
    }
    let mut traj = Trajectory::new(basis, time_grid(controls), states)?;
    traj.provenance = Provenance {
        system: system.fingerprint(),
        controls: controls.fingerprint(),
    };
    Ok(traj)
}

/// `Re Tr(A† B)` of two Hilbert-space matrices; equals the Liouville-space
/// real overlap because the tensor basis is orthonormal.
pub fn real_overlap(a: &CMat, b: &CMat) -> f64 {
    inner(a, b).re
}
