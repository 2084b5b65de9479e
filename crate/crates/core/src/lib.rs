//! Message-passing MIMO detection: AMP, the GNN-refined unfolded AMP-GNN
//! detector and its training engine, linear/OAMP baselines, exhaustive
//! oracles, and the Monte-Carlo benchmark harness behind the `ampgnn` CLI.
//!
//! Everything runs on the real-valued embedding of the complex system
//! (see [`system::RealSystem`]); a node of the GNN is one real dimension.

pub mod amp;
pub mod baselines;
pub mod bench;
pub mod complexity;
pub mod constellation;
pub mod detector;
pub mod error;
pub mod mpnn;
pub mod oracle;
pub mod system;
pub mod train;

pub use constellation::Constellation;
pub use detector::{amp_gnn_detect, AmpGnnConfig};
pub use error::{Error, Result};
pub use mpnn::{MpnnDims, MpnnParams};
pub use system::{LinearSystem, RealSystem, Sample};
