//! Multi-marginal optimal transport with structured couplings.
//!
//! * [`tensor`]: dense N-D tensors, marginals, tensor products and sums, entropy and KL.
//! * [`sinkhorn`]: log-domain Sinkhorn for entropic multi-marginal OT.
//! * [`dc`]: the MMOT-DC relaxation (KL penalty towards the factored projection)
//!   solved by a difference-of-convex iteration, with warm-start continuation.
//! * [`baselines`]: COOT block coordinate descent and entropic Gromov-Wasserstein.
//! * [`experiments`]: seeded reproduction studies writing CSV/JSON reports.
//! * [`io`]: JSON file formats for tensors, marginals and partitions.

pub mod baselines;
pub mod dc;
pub mod error;
pub mod experiments;
pub mod io;
pub mod sinkhorn;
pub mod tensor;

pub use error::{Error, Result};
