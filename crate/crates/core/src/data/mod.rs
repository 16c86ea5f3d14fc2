//! HR loading, LR synthesis, patch extraction, buffering and blur filtering.

pub mod blur;
pub mod buffer;
pub mod patches;
pub mod resize;
pub mod stream;

pub use blur::{is_blurry, laplacian_variance, scan_dataset, BlurReport, DEFAULT_BLUR_THRESHOLD};
pub use buffer::{PatchBuffer, SharedPatchBuffer};
pub use patches::{extract_patches, PatchDescriptor, PatchOptions, PatchRecord};
pub use resize::{bicubic_resize, bicubic_resize_tensor, ResizeOperator};
pub use stream::{ImageSource, PatchStream, StreamState};
