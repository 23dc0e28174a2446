//! Federated learning simulator for augmented-prototype contrastive training
//! under domain heterogeneity.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape.
//! * [`model`]: MLP encoder + linear classifier with a flat parameter view.
//! * [`augment`]: multi-view sample augmentation.
//! * [`prototype`]: mean view features, local and global class prototypes.
//! * [`loss`]: cross-entropy, prototype contrastive loss, prototype regulariser.
//! * [`federation`]: server/client rounds, aggregation, wire format, transports.
//! * [`data`]: synthetic multi-domain generator, IDX reader, partitioner.
//! * [`harness`]: experiment configs, evaluation, metrics output.
//! * [`gradcheck`]: finite-difference verification of the loss gradients.

pub mod augment;
pub mod data;
pub mod federation;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod model;
pub mod prototype;
pub mod seed;
pub mod tensor;

pub use tensor::{GradTape, Gradients, Tensor, TensorError};
