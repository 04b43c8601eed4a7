//! Tabular solver toolkit for semi-infinitely constrained Markov decision
//! processes (SICMDPs): MDPs whose constraint set is indexed by a continuum
//! `Y` rather than a finite list.
//!
//! The crate provides two solution pipelines plus the shared machinery they
//! build on:
//!
//! * [`sicrl`] — the model-based pipeline: an offline dataset is turned into
//!   an empirical transition model with per-entry confidence widths, and the
//!   resulting optimistic linear semi-infinite program is solved with a
//!   dual-exchange (cutting-constraint) loop over a warm-restarting LP engine.
//! * [`sicpo`] — the model-free pipeline: a tabular softmax policy is updated
//!   with sample-based natural policy gradient steps, alternating between
//!   reward ascent and descent on the most violated constraint.
//! * [`model`] — the tabular SICMDP representation, exact value and occupancy
//!   computation, and occupancy/policy conversions.
//! * [`constraint`] — the constraint family `(Y, c_y, u_y)` over an
//!   axis-aligned box and the interchangeable inner-loop maximizers.
//! * [`lp`] — a self-contained dense revised-simplex engine with dual-simplex
//!   re-optimization after appending a single row.
//! * [`bench`] — the Discharge-of-Sewage benchmark environment, dataset
//!   samplers, fine-grid reference solutions, and the experiment CLI driver.

pub mod bench;
pub mod constraint;
pub mod error;
pub mod linalg;
pub mod lp;
pub mod model;
pub mod sicpo;
pub mod sicrl;

pub use error::SicmdpError;
