//! Deep heterogeneous ensembles of heatmap-based weak predictors for 2D/3D
//! gaze estimation, trained end-to-end with a stochastic combinatory loss.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – dense f64 tensors and a tape-based reverse-mode autodiff graph.
//! * [`params`] – named parameter storage and the `DEESCO01` checkpoint container.
//! * [`gradcheck`] – central finite-difference gradient verification.
//! * [`branches`] – the four weak-predictor architectures (Ba, Rh, Fc, Ou).
//! * [`ensemble`] – subset enumeration, heatmap mixing, spatial softmax and soft-argmax decoding.
//! * [`loss`] – the L2 gaze loss, μ sampling, the combinatory loss and the total loss.
//! * [`optim`] / [`trainer`] – ADAM with polynomial annealing and the training loop.
//! * [`data`] – synthetic eye-crop generation, the `DGZS01` record format and fold construction.
//! * [`metrics`] – angular / Euclidean errors, fold aggregation and decorrelation statistics.
//! * [`experiment`] – configuration files and the command implementations behind the CLI.

pub mod branches;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
