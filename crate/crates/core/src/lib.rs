//! Toolkit for breaking the inter-speaker creak/pitch correlation of a
//! speech corpus and measuring what that does to creak manipulation.
//!
//! * [`adapt`] recentres each utterance's pitch per gender in the semitone
//!   domain (with Gaussian jitter) and resynthesises it with [`psola`].
//! * [`flow`] is a conditional continuous normalizing flow over speaker
//!   embeddings, used to shift the creak attribute of a speaker.
//! * [`acoustics`], [`stats`] and [`verify`] quantify the result through
//!   acoustic-correlate slopes and speaker-verification EER.
//! * [`synthexp`] runs the base / adapted / combined comparison end to end
//!   on synthetic embeddings with a known generative structure.

pub mod acoustics;
pub mod adapt;
pub mod audio;
pub mod creak;
pub mod error;
pub mod flow;
pub mod pitch;
pub mod psola;
pub mod stats;
pub mod synthexp;
pub mod vad;
pub mod verify;

pub use audio::{AudioClip, FrameSpec, GlottalSpec, Window};
pub use error::{Error, Result};
pub use pitch::{PitchContour, PitchRange};
pub use vad::SpeechSegments;
