//! Signal-processing front end and back end.

pub mod audio;
pub mod chroma;
pub mod pitch;
pub mod pqmf;
pub mod stft;
pub mod wav;

pub use audio::AudioBuffer;
pub use chroma::chroma;
pub use pitch::{pitch_shift_semitones, resample};
pub use pqmf::{pqmf_analysis, pqmf_synthesis, Pqmf, PqmfConfig, SubbandSignals};
pub use stft::{istft, stft, ComplexSpectrogram, Stft, StftConfig, Window};
