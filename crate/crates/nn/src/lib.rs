//! Minimal CPU training engine for EfficientNet-B0.
//!
//! Tensors are dense NCHW `f32`. Layers implement explicit forward and
//! backward passes; there is no tape. A training-mode forward caches the
//! activations its backward needs, and the backward consumes them.
//!
//! ```no_run
//! use fundus_nn::{EfficientNetB0, Mode, Tensor};
//!
//! let mut net = EfficientNetB0::new(0);
//! let x = Tensor::zeros([2, 3, 224, 224]);
//! let features = net.forward(x, &mut Mode::Eval);
//! assert_eq!(features.len(), 2 * 1280);
//! ```

pub mod efficientnet;
pub mod io;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;

pub use efficientnet::{EfficientNetB0, B0_FEATURE_DIM};
pub use layers::Mode;
pub use optim::{AdamW, AdamWConfig};
pub use param::{Module, Param};
pub use tensor::Tensor;
