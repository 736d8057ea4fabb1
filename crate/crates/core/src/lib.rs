//! Intrinsic image decomposition by single-step latent flow matching.
//!
//! An image is split into a single-channel shading layer and an RGB albedo
//! layer with `image = albedo * shading`. Shading is generated in the latent
//! space of a small VAE by a UNet conditioned on the image; one Euler step of
//! the learned velocity field maps noise to the shading latent, and albedo is
//! recovered by division.
//!
//! Module map:
//! - [`flow`]: conditional path, target velocity, loss and Euler sampler
//! - [`backbone`]: condition encoder and UNet
//! - [`vae`]: shading VAE, discriminator and stage-one losses
//! - [`pipeline`]: training stages, inference and evaluation
//! - [`data`]: preprocessing, synthetic scenes and dataset I/O
//! - [`metrics`]: MSE, LMSE, SSIM and reports
//! - [`config`]: run configuration files

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod image_plane;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod vae;

pub use backbone::{count_parameters, Ablation, FeatureBundle, FlowNetwork, ModelConfig, ParamCount};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, TrainSchedule};
pub use data::{synth_generate, ScenePair};
pub use error::{Error, Result};
pub use flow::{conditional_path, euler_integrate, fm_loss, target_velocity, FlowConfig};
pub use image_plane::ImagePlane;
pub use metrics::{MetricRecord, MetricReport};
pub use pipeline::{DecompositionResult, FlowStage, InferenceModel, VaeStage};
pub use vae::{Vae, VaeLossWeights};

pub use candle_core::{DType, Device, Tensor};
