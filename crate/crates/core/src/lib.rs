//! Cavity QED with atomic ensembles: weak-drive photon statistics,
//! synthetic photon-counting experiments and non-Markovianity measures.

pub mod analysis;
pub mod correlator;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod nonmarkov;
pub mod ode;
pub mod oracle;
pub mod trace;
pub mod trajectories;

pub use error::{Error, Result};
