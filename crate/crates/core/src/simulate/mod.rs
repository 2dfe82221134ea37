//! Training and test data simulation.

pub mod backing;
pub mod mix;
pub mod synth;
pub mod testset;

pub use backing::{chroma_similarity, mix_backing, select_backing, BackingChoice, BackingMix};
pub use mix::{measure_snr, mix_at_snr, simulate_pair, SimulatedPair};
pub use synth::{synth_accompaniment, synth_vocal, white_noise, Voice};
pub use testset::{build_test_set, read_manifest, regenerate, ManifestRow, Sources, TestSetKind};
