//! Training and adaptation losses, the multiview step, test-time adaptation,
//! prediction refinement, and the agreement rate.

mod agreement;
mod losses;
mod refine;
mod ttda;

pub use agreement::{agreement_rate, ConfusionMatrix};
pub use losses::*;
pub use refine::*;
pub use ttda::*;
