//! Gaussian forward diffusion, its noise schedule, a feature-conditioned
//! noise predictor, and the pixel-level noise regression loss.

mod process;
mod schedule;
mod unet;

pub use process::{
    diffusion_loss, diffusion_loss_grad, diffusion_loss_tensor, forward_diffuse, forward_diffuse_with_noise,
    iterative_diffuse, q_sample, DiffusionSample,
};
pub use schedule::{make_linear_schedule, NoiseSchedule, ScheduleSpec};
pub use unet::{noise_dump_grid, timestep_embedding, NoisePredictor, NoisePredictorConfig};
