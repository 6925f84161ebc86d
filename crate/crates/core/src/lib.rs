//! Symmetry and hyperbolicity analysis for systems of conservation laws written through
//! potentials `psi(z)`, with emphasis on Z-systems `psi = xi(z) * grad zeta(z)`.

pub mod catalog;
pub mod coupling;
pub mod dissipation;
pub mod error;
pub mod expr;
pub mod hyperbolicity;
pub mod linalg;
pub mod report;
pub mod sampling;
pub mod specfile;
pub mod symmetry;
pub mod system;
pub mod transforms;

pub use error::{Error, Result};
pub use expr::{Expr, Jet, JetValue, Point};
pub use linalg::{DenseMatrix, SubspaceBasis};
pub use sampling::{DomainBox, Sampling};
pub use system::{Field, Kind, SystemDef};
