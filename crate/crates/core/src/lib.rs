//! Physics-guided spatiotemporal prediction.
//!
//! A recurrent video/field predictor built from windowed attention, a
//! convolutional LSTM correction gate, learnable Fourier-domain mixing and a
//! gated two-stage Runge–Kutta update whose right-hand side is a bank of
//! moment-constrained derivative filters. Everything runs on the small
//! reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod data;
pub mod harness;
pub mod error;
pub mod gradcheck;
pub mod integrator;
pub mod params;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod physics;
pub mod spectral;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
