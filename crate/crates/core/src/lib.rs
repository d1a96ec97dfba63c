//! Poisson metrics on flat vector bundles with parabolic structure over the
//! two-punctured sphere.
//!
//! The punctured sphere is modelled as a truncated logarithmic cylinder
//! `x ∈ [-X, X]`, `y ∈ [0, 2π)`, with `x = -log r` near the puncture at the
//! origin. A flat bundle is described by its residue Jordan data at the two
//! punctures together with one parabolic weight per indecomposable block
//! ([`bundle`]). On this cylinder the crate builds the explicit block-diagonal
//! model metric and its unitary-frame connection ([`model`]), runs the
//! Dirichlet heat flow to the Poisson-metric boundary value problem and the
//! shrinking-truncation continuation with destabilizer extraction ([`flow`]),
//! and evaluates the geometric diagnostics: curvature degrees, Chern-Weil
//! integrals, tameness fits and dimension-reduction identities ([`analysis`]).
//!
//! Everything is deterministic: fixed stencils, fixed reduction orders, and
//! seeded randomness only.
//!
//! ```
//! use poisson_geometry::bundle::{FlatBundleSpec, stability_classify, StabilityClass};
//!
//! // Rank-2 bundle, one Jordan block at each puncture, zero weights.
//! let bundle = FlatBundleSpec::single_jordan_block(2, 1.0.into(), [0.0, 0.0]).unwrap();
//! let verdict = stability_classify(&bundle);
//! assert_eq!(verdict.class, StabilityClass::StrictlySemistable);
//! ```

pub mod analysis;
pub mod bundle;
pub mod config;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};

// Keep the book's code snippets compiling: every fenced Rust block in the
// guide chapters runs as a doctest of this crate.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(ch01_bundles, "../../../book/src/bundles.md");
    chapter!(ch02_cylinder, "../../../book/src/cylinder.md");
    chapter!(ch03_model, "../../../book/src/model.md");
    chapter!(ch04_flow, "../../../book/src/flow.md");
    chapter!(ch05_diagnostics, "../../../book/src/diagnostics.md");
}
