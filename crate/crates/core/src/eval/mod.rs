//! Evaluation harness: BD-Rate over rate-quality curves, entropy-identity
//! probes on trained codecs, and the sweep/generalization reports.

pub mod bd;
pub mod probe;
pub mod reports;
pub mod svg;

pub use bd::{bd_rate, BdResult, RdCurve, RdPoint};
pub use probe::{identity_probe, ProbeGrid, ProbeReport};
pub use reports::{alpha_sweep, domain_shift_report, AlphaSweepReport, DomainShiftReport};
