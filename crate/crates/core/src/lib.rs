//! Mask-conditioned diffusion inpainting for lesion filling and lesion
//! synthesis on two-channel brain phantoms.
//!
//! Images live in two intensity spaces: file space `[0, 1]` (what the phantom
//! generator, metrics and on-disk formats use) and model space `[-1, 1]`
//! (what the denoiser and samplers see). [`fill_lesions`] and
//! [`synthesize_lesions`] take and return file-space images.

pub mod diffusion;
pub mod error;
pub mod eval;
pub mod formats;
pub mod grid;
pub mod inpaint;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod schedule;

pub use error::{Error, Result};
pub use eval::{dice, fill_report, synth_report, toy_segment, MetricsReport, SegmentThresholds};
pub use grid::{ImageGrid, Mask};
pub use inpaint::{fill_lesions, synthesize_lesions, InpaintRequest, SamplerConfig, SamplerMode};
pub use model::{DenoiserModel, GaussianPrior, LrDecay, NoisePredictor, TrainConfig, TrainSample};
pub use phantom::{generate_corpus, generate_phantom, wm_intersect, PhantomPair, PhantomSpec};
pub use schedule::{NoiseSchedule, ScheduleSpec, StepSubsequence};
