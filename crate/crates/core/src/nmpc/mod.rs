//! Decentralized NMPC: reference generation, transcription and the SQP/QP solvers.

pub mod ocp;
pub mod qp;
pub mod reference;
pub mod sqp;

pub use ocp::{transcribe, NeighborKind, NeighborSnapshot, Nlp, OcpConfig, OcpError, SafetyMargins, SolveMode, TrajectoryReference};
pub use reference::{MinJerkSegment, RefPoint};
pub use sqp::{solve_sqp, NmpcController, OcpSolution, SolveStatus, Trajectory};
