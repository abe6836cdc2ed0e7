//! Nonlinear decomposition of large binary multidimensional arrays.
//!
//! The latent array `M` behind the observations is modelled by a
//! tensor-variate Gaussian process whose covariance is the Kronecker
//! product of per-mode kernel Grams over latent factors `U⁽ᵏ⁾`. Binary
//! entries follow through a probit link. Training never touches the whole
//! array: it samples many small subarrays, splits them among worker groups,
//! runs variational EM with stochastic gradient steps inside each group and
//! averages the group factors after every round.
//!
//! ```
//! use tensorgp::executor::{train, TrainConfig};
//! use tensorgp::kernel::KernelSpec;
//! use tensorgp::sampler::{SamplerSpec, Strategy};
//! use tensorgp::synth::synth_generate;
//! use tensorgp::tensor::Shape;
//!
//! let shape = Shape::new(vec![8, 8, 8]).unwrap();
//! let (y, _truth) = synth_generate(&shape, 2, &KernelSpec::rbf(1.0), 7).unwrap();
//! let cfg = TrainConfig {
//!     rank: 2,
//!     lambda: 1.0,
//!     eta: 0.01,
//!     kernel: KernelSpec::rbf(1.0),
//!     sampler: SamplerSpec {
//!         strategy: Strategy::Weighted,
//!         sub_shape: vec![4, 4, 4],
//!         count: 16,
//!         seed: 7,
//!     },
//!     groups: 2,
//!     rounds: 2,
//!     estep_sweeps: 2,
//!     seed: 7,
//!     checkpoint_dir: None,
//!     parallelism: 2,
//!     persist_group_factors: false,
//! };
//! let u = train(&y, &cfg).unwrap();
//! assert_eq!(u.dims(), vec![8, 8, 8]);
//! ```

pub mod cli;
pub mod error;
pub mod eval;
pub mod executor;
pub mod inference;
pub mod kernel;
pub mod predict;
pub mod probit;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod tvgp;

pub use error::{Error, Result};

// The guide's listings run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/tvgp.md")]
    mod tvgp {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/executor.md")]
    mod executor {}
    #[doc = include_str!("../../../book/src/prediction.md")]
    mod prediction {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
