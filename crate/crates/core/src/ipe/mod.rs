//! Iterative personalized enhancement: cleanliness scores, speaker embeddings and the
//! embedding update rule.

pub mod net;
pub mod score;
pub mod sem;
pub mod state;

pub use net::{snr_features, IpeNet, SnrModule, SnrStream};
pub use score::frame_magnitude_sums;
pub use score::{cleanliness_score, estimate_lambda, CleanlinessStats};
pub use sem::{PrecomputedEmbeddings, SpeakerEmbedding, SpeakerEncoder, ToySpeakerEncoder};
pub use state::IpeStreamState;

use crate::error::{Error, Result};
use crate::nn::ModelWeights;

/// Metadata key of the trained acceptance threshold.
pub const META_LAMBDA_T: &str = "ipe.lambda_t";
pub const META_SNR_MEAN: &str = "ipe.snr_mean";
pub const META_SNR_STD: &str = "ipe.snr_std";

pub fn store_ipe_metadata(ws: &mut ModelWeights, lambda_t: f64, stats: CleanlinessStats) {
    ws.set_metadata_f64(META_LAMBDA_T, lambda_t);
    ws.set_metadata_f64(META_SNR_MEAN, stats.mean);
    ws.set_metadata_f64(META_SNR_STD, stats.std);
}

pub fn trained_lambda(ws: &ModelWeights) -> Result<Option<f64>> {
    ws.metadata_f64(META_LAMBDA_T)
}

pub fn trained_stats(ws: &ModelWeights) -> Result<Option<CleanlinessStats>> {
    match (ws.metadata_f64(META_SNR_MEAN)?, ws.metadata_f64(META_SNR_STD)?) {
        (Some(mean), Some(std)) if std > 0.0 => Ok(Some(CleanlinessStats { mean, std })),
        (None, None) => Ok(None),
        _ => Err(Error::Format("incomplete or invalid cleanliness statistics in weights metadata".into())),
    }
}
