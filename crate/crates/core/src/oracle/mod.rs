//! Ground truth computed without the tape: a straight-line MLP with manual
//! backprop, finite differences, closed-form quadratic meta-gradients and
//! the sign-unroll collapse check.

pub mod collapse;
pub mod fd;
pub mod quadratic;
pub mod reference;
pub mod report;
pub mod suite;

pub use collapse::collapse_check;
pub use fd::{fd_meta_grad, FdEstimate, FdMode, FdSpec};
pub use quadratic::quadratic_bilevel_oracle;
pub use reference::ReferenceMlp;
pub use report::VerificationReport;
pub use suite::{run_suite, SuiteConfig};
