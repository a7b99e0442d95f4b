//! Set disjointness: synthetic data, a streaming solver over the repeated
//! input, a linear-attention construction and reductions to and from
//! associative recall.

pub mod gar;
pub mod generator;
pub mod linatt;
pub mod streaming;

pub use gar::{
    gar_solve_via_sd, sd_solve_via_gar, BruteForceSd, Counting, DictionaryGar, GarInstance, GarOracle, LinAttSd, SdOracle,
    StreamingSd,
};
pub use generator::{
    from_sets, gen_mixture, gen_sd_instance, read_jsonl, write_jsonl, Profile, SdInstance, SpecialTokens, Split,
};
pub use linatt::{linatt_sd_solve, LinAttSdOutput};
pub use streaming::{
    brute_force_intersection, encode_jrt, encode_rows, streaming_sd_solve, streaming_sd_solve_with, Row, StreamResult, Thresholds,
};
