//! MBTFNet: configuration, sub-band front end, building blocks and the assembled network.

pub mod blocks;
pub mod config;
pub mod enhance;
pub mod frontend;
pub mod net;

pub use config::{MbtfConfig, EMBED_DIM};
pub use frontend::{SpecLayout, SubbandFrontend};
pub use net::{Mbtfnet, Sve, SveVars};
pub use enhance::{default_chunk_frames, ChunkDecision, EnhanceMode, EnhanceOutput, Enhancer, SveBands};
