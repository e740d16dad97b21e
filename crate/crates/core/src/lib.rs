//! Spin dynamics under optimal control pulses and the subspace analysis
//! that makes the resulting trajectories readable.

pub mod analysis;
pub mod basis;
pub mod error;
pub mod grape;
pub mod io;
pub mod lbfgs;
pub mod linalg;
pub mod liouville;
pub mod system;

pub use basis::{BasisLabel, ProductBasis, SpinOp};
pub use error::{Error, Result};
pub use linalg::{CMat, C64};
pub use liouville::{Axis, Channel, ControlSet, StateVector, Trajectory};
pub use system::{Coupling, CouplingModel, Quadrupolar, Spin, SpinSystem};
