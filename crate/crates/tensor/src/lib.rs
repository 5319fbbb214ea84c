//! Dense CPU tensors with a single-use reverse-mode tape, parameter storage,
//! an Adam optimizer and a small binary checkpoint container.
//!
//! The scalar type is a generic parameter: models train in `f32` and the
//! same code is instantiated in `f64` for finite-difference gradient checks.
//!
//! ```
//! use vsd_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.input(Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
//! ```

mod adam;
mod checkpoint;
mod error;
pub mod gradcheck;
pub mod nn;
mod ops;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use error::{Result, TensorError};
pub use ops::Conv2dGeometry;
pub use param::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;
