//! IO, file formats, checkpoints, TTS backends and the experiment harness
//! around `slu-core`.

pub mod checkpoint;
pub mod desk;
pub mod harness;
pub mod io;
pub mod tts;
