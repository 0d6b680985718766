//! Grid data validation, load flow and fair PV hosting-capacity allocation
//! for low-voltage distribution networks.

pub mod finding;
pub mod grid;
pub mod hosting;
pub mod lfcheck;
pub mod powerflow;
pub mod profiles;
pub mod rules;
pub mod sensitivity;

pub use finding::{EntityKind, EntityRef, Finding, Severity};
pub use grid::{Grid, GridError};
