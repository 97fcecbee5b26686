//! Learning dissipative dynamic output-feedback controllers from expert
//! demonstrations.
//!
//! The crate is layered bottom-up: [`numlin`] dense linear algebra, [`lmi`]
//! small semidefinite solvers (ADMM and interior point), [`plant`] discrete-time systems,
//! [`dissipativity`] QSR certificates, [`experts`] testbeds and data,
//! [`training`] the learners and [`harness`] experiment orchestration.

pub mod dissipativity;
pub mod error;
pub mod experts;
pub mod harness;
pub mod lmi;
pub mod numlin;
pub mod plant;
pub mod training;

pub use error::{Error, Result};
pub use lmi::{LmiBlock, SdpProblem, SdpSolution, SdpStatus};
pub use numlin::{Matrix, SymEig};
pub use plant::{DiscreteStateSpace, PlantModel, SinePlant, Trajectory};
pub use dissipativity::{Certificate, QsrSupply};
pub use training::{ControllerParams, TrainingConfig, TrainingReport};
