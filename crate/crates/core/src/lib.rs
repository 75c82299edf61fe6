//! Style-following F0 curve generation.
//!
//! Pitch curves are generated by masked infilling with a rectified-flow
//! diffusion transformer: given a note sequence for every frame and the
//! unmasked pitch context, the model regenerates the masked frames so that
//! they follow the score while continuing the singer's expressive habits
//! (vibrato, slides, drift) observed in the context.
//!
//! Module map:
//!
//! * [`signal`]: pitch representations, unit conversions, masks, augmentation.
//! * [`score`]: F0 → smoothed note events (activation blur + segmentation).
//! * [`synth`]: parametric synthetic singer for desk-scale data.
//! * [`net`]: the velocity transformer with hand-written backward pass.
//! * [`flow`]: rectified-flow loss, guidance, midpoint sampler, training.
//! * [`task`]: input construction for pitch correction and style transfer.
//! * [`eval`]: melody accuracy metrics and vibrato probes.
//! * [`cli`]: the `pitchflow` command-line surface.

pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod net;
pub mod rng;
pub mod score;
pub mod signal;
pub mod synth;
pub mod task;

pub use error::{Error, Result};
