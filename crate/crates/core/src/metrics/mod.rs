//! Fidelity and perceptual metrics, checkpoint-set evaluation, diversity.

pub mod eval;
pub mod fidelity;
pub mod lpips;

pub use eval::{
    average_scores, diversity, evaluate, evaluate_models, load_pairs, DatasetSpec, EvalPair,
    EvalProtocol, EvalReport, ScoreTriple, Upscaler,
};
pub use fidelity::{psnr, ssim};
pub use lpips::{Lpips, LpipsBackend};
