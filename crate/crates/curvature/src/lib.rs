//! Prescribed curvature problems on grid model manifolds.
//!
//! The crate solves the Yamabe-type equation
//! `−aΔu + R u = S u^{p−1}` (with the Robin boundary law
//! `∂u/∂ν + κ h u = κ H u^{p/2}` on cylinders, `κ = 2/(p−2)`) by monotone
//! iteration between verified lower and upper solutions, and the 2D Gauss
//! curvature problem `−Δu + K_g = K e^{2u}` by constrained minimization.
//! Every solve ends in a certificate that re-checks the discrete equation and
//! the Kazdan–Warner identities from the raw fields.

pub mod conformal;
pub mod grid;
pub mod iterate;
pub mod linalg;
pub mod scenarios;
pub mod subsuper;
pub mod surface2d;

pub use conformal::{ConformalConstants, NecessaryVerdict, SolutionCertificate, VerdictCase};
pub use grid::{FieldKind, GridManifold, ScalarField, Topology};
