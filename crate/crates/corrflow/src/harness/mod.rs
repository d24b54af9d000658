//! Training/evaluation harness: synthetic data, AdamW, the training
//! loop, config files, and flow/image I/O.

pub mod config;
pub mod floio;
pub mod optim;
pub mod ppm;
pub mod synth;
pub mod train;

pub use config::apply_config;
pub use floio::{read_flo, write_flo};
pub use optim::{adamw_step, AdamHyper, AdamState};
pub use ppm::{decode_ppm, encode_ppm, flow_to_color, read_ppm, write_ppm};
pub use synth::{gen_synthetic_pair, pair_seed, SyntheticPair, WarpKind, WarpSpec};
pub use train::{evaluate, train, EvalReport, EvalSpec, TrainConfig, TrainOutcome};
