//! Rank coarse climate models against a high-resolution reference with a
//! learned-weight TOPSIS procedure, then downscale the chosen model output to
//! the fine grid with one of four spatiotemporal networks.

pub mod downscale;
pub mod geogrid;
pub mod rng;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod ranking;
pub mod tensor;
