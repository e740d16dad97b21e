//! Subspace populations, grouping transforms and trajectory similarity scores.
//!
//! Every projector used here is diagonal in the tensor product basis, so a
//! population is just the norm of the selected coefficients.

use serde::Serialize;

use crate::basis::{BasisLabel, ProductBasis};
use crate::error::{domain, Result};
use crate::liouville::{dot, norm, StateVector, Trajectory};
use crate::linalg::C64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProjectorSpec {
    CorrOrder(usize),
    CohOrder(i32),
    LocalSpin(usize),
    Involving(usize),
    /// Caller-supplied membership mask.
    Custom(Vec<bool>),
}

impl ProjectorSpec {
    /// Column name used in CSV output.
    pub fn column_name(&self) -> String {
        match self {
            Self::CorrOrder(k) => format!("corr_order_{k}"),
            Self::CohOrder(m) => format!("coh_order_{m}"),
            Self::LocalSpin(k) => format!("local_spin_{k}"),
            Self::Involving(k) => format!("involving_{k}"),
            Self::Custom(_) => "custom".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub spec: ProjectorSpec,
    pub mask: Vec<bool>,
}

impl Projector {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Largest attainable coherence order, `Σ (2s_k)`.
pub fn max_coherence_order(basis: &ProductBasis) -> i32 {
    basis.multiplicities().iter().map(|&n| n as i32 - 1).sum()
}

pub fn build_projector(basis: &ProductBasis, spec: ProjectorSpec) -> Result<Projector> {
    let n = basis.n_spins();
    let spin_in_range = |k: usize| {
        if k < n {
            Ok(())
        } else {
            Err(domain(format!("spin index {k} out of range for {n} spins")))
        }
    };
    let select = |f: &dyn Fn(&BasisLabel) -> bool| basis.labels().iter().map(f).collect::<Vec<_>>();
    let mask = match &spec {
        ProjectorSpec::CorrOrder(k) => {
            if *k > n {
                return Err(domain(format!("correlation order {k} exceeds spin count {n}")));
            }
            select(&|lab| lab.correlation_order() == *k)
        }
        ProjectorSpec::CohOrder(m) => {
            let max = max_coherence_order(basis);
            if m.abs() > max {
                return Err(domain(format!("coherence order {m} outside ±{max}")));
            }
            select(&|lab| lab.coherence_order() == *m)
        }
        ProjectorSpec::LocalSpin(k) => {
            spin_in_range(*k)?;
            select(&|lab| lab.correlation_order() == 1 && lab.components[*k].0 > 0)
        }
        ProjectorSpec::Involving(k) => {
            spin_in_range(*k)?;
            select(&|lab| lab.components[*k].0 > 0)
        }
        ProjectorSpec::Custom(mask) => {
            if mask.len() != basis.dim() {
                return Err(domain(format!(
                    "custom mask has length {}, basis dimension is {}",
                    mask.len(),
                    basis.dim()
                )));
            }
            mask.clone()
        }
    };
    Ok(Projector { spec, mask })
}

/// All correlation-order projectors, `k = 0..=N`.
pub fn corr_order_projectors(basis: &ProductBasis) -> Vec<Projector> {
    (0..=basis.n_spins())
        .map(|k| build_projector(basis, ProjectorSpec::CorrOrder(k)).expect("order in range"))
        .collect()
}

/// All coherence-order projectors, `m = -M..=M`.
pub fn coh_order_projectors(basis: &ProductBasis) -> Vec<Projector> {
    let max = max_coherence_order(basis);
    (-max..=max)
        .map(|m| build_projector(basis, ProjectorSpec::CohOrder(m)).expect("order in range"))
        .collect()
}

pub fn local_spin_projectors(basis: &ProductBasis) -> Vec<Projector> {
    (0..basis.n_spins())
        .map(|k| build_projector(basis, ProjectorSpec::LocalSpin(k)).expect("spin in range"))
        .collect()
}

pub fn involving_projectors(basis: &ProductBasis) -> Vec<Projector> {
    (0..basis.n_spins())
        .map(|k| build_projector(basis, ProjectorSpec::Involving(k)).expect("spin in range"))
        .collect()
}

fn masked_norm(mask: &[bool], coeffs: &[C64]) -> f64 {
    mask.iter()
        .zip(coeffs)
        .filter(|(m, _)| **m)
        .map(|(_, c)| c.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// `‖P ρ‖`
pub fn population(projector: &Projector, rho: &StateVector) -> Result<f64> {
    if projector.mask.len() != rho.dim() {
        return Err(domain(format!(
            "projector dimension {} does not match state dimension {}",
            projector.mask.len(),
            rho.dim()
        )));
    }
    Ok(masked_norm(&projector.mask, rho.coefficients()))
}

pub fn population_series(projector: &Projector, traj: &Trajectory) -> Result<Vec<f64>> {
    if projector.mask.len() != traj.basis().dim() {
        return Err(domain("projector dimension does not match trajectory basis"));
    }
    Ok(traj.states().iter().map(|s| masked_norm(&projector.mask, s)).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    #[default]
    None,
    Sg,
    Bsg,
}

impl std::str::FromStr for Grouping {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sg" => Ok(Self::Sg),
            "bsg" => Ok(Self::Bsg),
            other => Err(domain(format!("unknown grouping '{other}' (expected none, sg or bsg)"))),
        }
    }
}

impl Grouping {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Sg => "sg",
            Self::Bsg => "bsg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    /// Orbit index for SG, spin index for BSG.
    pub id: usize,
    pub members: Vec<usize>,
}

/// Phase-free image of a trajectory. `values[t][g]` is the norm of the
/// coefficients in group `g` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedTrajectory {
    pub mode: Grouping,
    pub groups: Vec<Group>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl GroupedTrajectory {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Value series of one group.
    pub fn series(&self, group: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[group]).collect()
    }
}

/// Orbits of basis indices under the simultaneous flip of every `m`,
/// ordered by their smallest member.
pub fn sg_groups(basis: &ProductBasis) -> Vec<Group> {
    let mut groups = Vec::new();
    for (i, label) in basis.labels().iter().enumerate() {
        let j = basis.index_of(&label.flipped()).expect("flipped label is in the basis");
        if j < i {
            continue;
        }
        let members = if j == i { vec![i] } else { vec![i, j] };
        groups.push(Group {
            id: groups.len(),
            members,
        });
    }
    groups
}

fn apply_groups(mode: Grouping, groups: Vec<Group>, traj: &Trajectory) -> GroupedTrajectory {
    let values = traj
        .states()
        .iter()
        .map(|s| {
            groups
                .iter()
                .map(|g| g.members.iter().map(|&i| s[i].norm_sqr()).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    GroupedTrajectory {
        mode,
        groups,
        times: traj.times().to_vec(),
        values,
    }
}

pub fn sg_transform(traj: &Trajectory) -> GroupedTrajectory {
    apply_groups(Grouping::Sg, sg_groups(traj.basis()), traj)
}

/// Per-spin single-spin populations; multi-spin content is discarded.
pub fn bsg_transform(traj: &Trajectory) -> GroupedTrajectory {
    let groups = local_spin_projectors(traj.basis())
        .into_iter()
        .enumerate()
        .map(|(k, p)| Group {
            id: k,
            members: p.mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect(),
        })
        .collect();
    apply_groups(Grouping::Bsg, groups, traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Rsp,
    Rdn,
}

impl std::str::FromStr for ScoreKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsp" => Ok(Self::Rsp),
            "rdn" => Ok(Self::Rdn),
            other => Err(domain(format!("unknown score '{other}' (expected rsp or rdn)"))),
        }
    }
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rsp => "rsp",
            Self::Rdn => "rdn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub score_kind: ScoreKind,
    pub grouping: Grouping,
    pub times: Vec<f64>,
    /// Real part for ungrouped RSP; the score itself otherwise.
    pub scores: Vec<f64>,
    /// `|s(t)|`, present only for ungrouped RSP.
    pub magnitudes: Option<Vec<f64>>,
    pub min: f64,
    pub mean: f64,
}

impl SimilarityReport {
    fn new(
        score_kind: ScoreKind,
        grouping: Grouping,
        times: Vec<f64>,
        scores: Vec<f64>,
        magnitudes: Option<Vec<f64>>,
    ) -> Self {
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        Self {
            score_kind,
            grouping,
            times,
            scores,
            magnitudes,
            min,
            mean,
        }
    }

    /// CSV column names, matching [`SimilarityReport::columns`].
    pub fn column_names(&self) -> Vec<String> {
        let base = match self.grouping {
            Grouping::None => self.score_kind.as_str().to_string(),
            g => format!("{}_{}", g.as_str(), self.score_kind.as_str()),
        };
        let mut names = vec![base.clone()];
        if self.magnitudes.is_some() {
            names.push(format!("{base}_abs"));
        }
        names
    }

    pub fn columns(&self) -> Vec<&[f64]> {
        let mut cols: Vec<&[f64]> = vec![&self.scores];
        if let Some(m) = &self.magnitudes {
            cols.push(m);
        }
        cols
    }
}

fn check_grids(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.basis().multiplicities() != b.basis().multiplicities() {
        return Err(domain("trajectories use different bases"));
    }
    if a.len() != b.len() {
        return Err(domain(format!("time grids differ in length: {} vs {}", a.len(), b.len())));
    }
    for (i, (ta, tb)) in a.times().iter().zip(b.times()).enumerate() {
        if (ta - tb).abs() > 1e-12 * ta.abs().max(tb.abs()).max(1e-300) {
            return Err(domain(format!("time grids differ at step {i}: {ta} vs {tb}")));
        }
    }
    Ok(())
}

fn grouped_pair(a: &Trajectory, b: &Trajectory, grouping: Grouping) -> (GroupedTrajectory, GroupedTrajectory) {
    match grouping {
        Grouping::Sg => (sg_transform(a), sg_transform(b)),
        _ => (bsg_transform(a), bsg_transform(b)),
    }
}

/// Running scalar product.
pub fn rsp(a: &Trajectory, b: &Trajectory, grouping: Grouping) -> Result<SimilarityReport> {
    check_grids(a, b)?;
    let times = a.times().to_vec();
    if grouping == Grouping::None {
        let s: Vec<C64> = a.states().iter().zip(b.states()).map(|(x, y)| dot(x, y)).collect();
        return Ok(SimilarityReport::new(
            ScoreKind::Rsp,
            grouping,
            times,
            s.iter().map(|z| z.re).collect(),
            Some(s.iter().map(|z| z.norm()).collect()),
        ));
    }
    let (ga, gb) = grouped_pair(a, b, grouping);
    let scores = ga
        .values
        .iter()
        .zip(&gb.values)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect();
    Ok(SimilarityReport::new(ScoreKind::Rsp, grouping, times, scores, None))
}

/// Running difference norm, `1 - ‖a - b‖ / 2`.
pub fn rdn(a: &Trajectory, b: &Trajectory, grouping: Grouping) -> Result<SimilarityReport> {
    check_grids(a, b)?;
    let times = a.times().to_vec();
    let scores = if grouping == Grouping::None {
        a.states()
            .iter()
            .zip(b.states())
            .map(|(x, y)| {
                let diff: Vec<C64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
                1.0 - norm(&diff) / 2.0
            })
            .collect()
    } else {
        let (ga, gb) = grouped_pair(a, b, grouping);
        ga.values
            .iter()
            .zip(&gb.values)
            .map(|(x, y)| 1.0 - x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt() / 2.0)
            .collect()
    };
    Ok(SimilarityReport::new(ScoreKind::Rdn, grouping, times, scores, None))
}

pub fn similarity(a: &Trajectory, b: &Trajectory, kind: ScoreKind, grouping: Grouping) -> Result<SimilarityReport> {
    match kind {
        ScoreKind::Rsp => rsp(a, b, grouping),
        ScoreKind::Rdn => rdn(a, b, grouping),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Involvement {
    pub spin: usize,
    pub max_population: f64,
    pub droppable: bool,
}

/// Peak involvement of each spin over the trajectory; spins that never
/// reach `threshold` are candidates for removal from the simulation.
pub fn involvement_report(traj: &Trajectory, threshold: f64) -> Result<Vec<Involvement>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(domain(format!("threshold {threshold} must lie in (0, 1)")));
    }
    involving_projectors(traj.basis())
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let max = population_series(p, traj)?.into_iter().fold(0.0, f64::max);
            Ok(Involvement {
                spin: k,
                max_population: max,
                droppable: max < threshold,
            })
        })
        .collect()
}
