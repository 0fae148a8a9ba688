//! Pixel-space conditional denoiser: noise schedule, toy text encoder,
//! U-Net with cross-attention capture and the zero-convolution adapter.

pub mod model;
pub mod schedule;
pub mod text;
pub mod unet;

pub use model::{
    AttentionRecord, AttentionSource, BlockId, CaptureRequest, Conditioning, Model, ModelConfig, ParamGroup,
};
pub use schedule::{add_noise, make_schedule, NoiseSchedule, ScheduleConfig};
pub use text::{tokenize, TextBatch, TextConfig, TextEncoder, TextEncoding, TokenizedPrompt};
pub use unet::CapturedAttention;
