//! Spin system description: isotopes, offsets, scalar couplings and
//! quadrupolar interactions.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spin {
    /// Isotope label such as `1H` or `13C`. Spins sharing a label share
    /// control channels.
    pub isotope: String,
    /// `2s + 1`
    pub multiplicity: usize,
    /// Rotating-frame Zeeman offset in Hz.
    pub offset_hz: f64,
    /// Optional human-readable name, e.g. `Ha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Spin {
    pub fn new(isotope: &str, multiplicity: usize, offset_hz: f64) -> Self {
        Self {
            isotope: isotope.to_string(),
            multiplicity,
            offset_hz,
            label: None,
        }
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingModel {
    /// `Sz Sz` only.
    Weak,
    /// Full isotropic `S·S`.
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    pub j_hz: f64,
    /// When absent, same-isotope pairs couple strongly and heteronuclear
    /// pairs weakly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<CouplingModel>,
}

impl Coupling {
    pub fn new(i: usize, j: usize, j_hz: f64) -> Self {
        Self {
            i,
            j,
            j_hz,
            model: None,
        }
    }

    pub fn with_model(mut self, model: CouplingModel) -> Self {
        self.model = Some(model);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadrupolar {
    pub spin: usize,
    pub omega_q_hz: f64,
    pub eta: f64,
}

/// A validated spin system. Construction checks every invariant, so the
/// rest of the crate can index freely.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinSystem {
    spins: Vec<Spin>,
    couplings: Vec<Coupling>,
    quadrupolar: Vec<Quadrupolar>,
}

impl SpinSystem {
    pub fn new(
        spins: Vec<Spin>,
        couplings: Vec<Coupling>,
        quadrupolar: Vec<Quadrupolar>,
    ) -> Result<Self> {
        if spins.is_empty() {
            return Err(domain("a spin system needs at least one spin"));
        }
        for (k, s) in spins.iter().enumerate() {
            if s.isotope.trim().is_empty() {
                return Err(domain(format!("spin {k}: empty isotope label")));
            }
            if s.multiplicity < 2 {
                return Err(domain(format!(
                    "spin {k}: multiplicity {} is below 2",
                    s.multiplicity
                )));
            }
            if !s.offset_hz.is_finite() {
                return Err(domain(format!("spin {k}: offset is not finite")));
            }
        }
        let n = spins.len();
        let mut seen = Vec::new();
        for (idx, c) in couplings.iter().enumerate() {
            if c.i >= c.j {
                return Err(domain(format!(
                    "coupling {idx}: indices must satisfy i < j, got ({}, {})",
                    c.i, c.j
                )));
            }
            if c.j >= n {
                return Err(domain(format!(
                    "coupling {idx}: spin index {} out of range for {n} spins",
                    c.j
                )));
            }
            if !c.j_hz.is_finite() {
                return Err(domain(format!("coupling {idx}: J is not finite")));
            }
            if seen.contains(&(c.i, c.j)) {
                return Err(domain(format!(
                    "coupling {idx}: duplicate coupling for pair ({}, {})",
                    c.i, c.j
                )));
            }
            seen.push((c.i, c.j));
        }
        let mut quad_seen = Vec::new();
        for (idx, q) in quadrupolar.iter().enumerate() {
            if q.spin >= n {
                return Err(domain(format!(
                    "quadrupolar {idx}: spin index {} out of range for {n} spins",
                    q.spin
                )));
            }
            if spins[q.spin].multiplicity < 3 {
                return Err(domain(format!(
                    "quadrupolar {idx}: spin {} has multiplicity {}, quadrupolar terms need at least 3",
                    q.spin, spins[q.spin].multiplicity
                )));
            }
            if !(0.0..=1.0).contains(&q.eta) {
                return Err(domain(format!(
                    "quadrupolar {idx}: eta = {} lies outside [0, 1]",
                    q.eta
                )));
            }
            if !q.omega_q_hz.is_finite() {
                return Err(domain(format!("quadrupolar {idx}: omega_q is not finite")));
            }
            if quad_seen.contains(&q.spin) {
                return Err(domain(format!(
                    "quadrupolar {idx}: spin {} already has a quadrupolar term",
                    q.spin
                )));
            }
            quad_seen.push(q.spin);
        }
        Ok(Self {
            spins,
            couplings,
            quadrupolar,
        })
    }

    /// Uncoupled spins with the given isotopes and offsets, multiplicities
    /// taken from the isotope table.
    pub fn uncoupled(spins: &[(&str, f64)]) -> Result<Self> {
        let spins = spins
            .iter()
            .map(|&(iso, off)| {
                let mult = default_multiplicity(iso)
                    .ok_or_else(|| domain(format!("unknown isotope {iso}; give a multiplicity")))?;
                Ok(Spin::new(iso, mult, off))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(spins, vec![], vec![])
    }

    pub fn spins(&self) -> &[Spin] {
        &self.spins
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    pub fn quadrupolar(&self) -> &[Quadrupolar] {
        &self.quadrupolar
    }

    pub fn n_spins(&self) -> usize {
        self.spins.len()
    }

    pub fn multiplicities(&self) -> Vec<usize> {
        self.spins.iter().map(|s| s.multiplicity).collect()
    }

    pub fn hilbert_dim(&self) -> usize {
        self.spins.iter().map(|s| s.multiplicity).product()
    }

    pub fn liouville_dim(&self) -> usize {
        self.hilbert_dim().pow(2)
    }

    /// Coupling model after applying the isotope-based default.
    pub fn effective_model(&self, c: &Coupling) -> CouplingModel {
        c.model.unwrap_or_else(|| {
            if self.spins[c.i].isotope == self.spins[c.j].isotope {
                CouplingModel::Strong
            } else {
                CouplingModel::Weak
            }
        })
    }

    pub fn has_isotope(&self, isotope: &str) -> bool {
        self.spins.iter().any(|s| s.isotope == isotope)
    }

    /// Distinct isotope labels in order of first appearance.
    pub fn isotopes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.spins {
            if !out.contains(&s.isotope) {
                out.push(s.isotope.clone());
            }
        }
        out
    }

    /// Copy with `shift_hz` added to the offsets of every spin of `isotope`
    /// (every spin when `isotope` is `None`).
    pub fn with_offset_shift(&self, isotope: Option<&str>, shift_hz: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.spins {
            if isotope.is_none_or(|iso| s.isotope == iso) {
                s.offset_hz += shift_hz;
            }
        }
        out
    }

    /// Index of the spin with the given label, or the parsed index itself.
    pub fn resolve_spin(&self, name: &str) -> Result<usize> {
        let name = name.trim();
        if let Some(k) = self
            .spins
            .iter()
            .position(|s| s.label.as_deref() == Some(name))
        {
            return Ok(k);
        }
        match name.parse::<usize>() {
            Ok(k) if k < self.spins.len() => Ok(k),
            Ok(k) => Err(domain(format!(
                "spin index {k} out of range for {} spins",
                self.spins.len()
            ))),
            Err(_) => Err(domain(format!("unknown spin {name:?}"))),
        }
    }
}

/// Multiplicity of common magnetic isotopes.
pub fn default_multiplicity(isotope: &str) -> Option<usize> {
    match isotope {
        "1H" | "3He" | "13C" | "15N" | "19F" | "29Si" | "31P" | "E" => Some(2),
        "2H" | "6Li" | "14N" => Some(3),
        "7Li" | "11B" | "23Na" | "35Cl" => Some(4),
        "17O" | "27Al" => Some(6),
        _ => None,
    }
}
