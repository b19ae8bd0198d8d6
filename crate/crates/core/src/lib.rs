//! Semi-implicit variational inference trained with kernelized path
//! gradients (KPG), an importance-sampled variant (KPG-IS), and an
//! amortized-SVGD baseline, together with the targets, samplers and
//! diagnostics needed to benchmark them.

pub mod autodiff;
pub mod targets;
pub mod sivi;
pub mod proposal;
pub mod estimators;
pub mod training;
pub mod diagnostics;
pub mod eval;
