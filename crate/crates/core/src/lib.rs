//! Heat transport through a flux-tunable transmon between two resonators.

pub mod bath;
pub mod experiments;
pub mod heom;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod perturbative;
pub mod quad;
pub mod units;
