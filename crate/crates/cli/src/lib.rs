//! Experiment harness around `gmetro-core`: TOML experiment configs, the
//! train/evaluate/invariance/discover/report/gen-data commands, and the
//! stamped artifact files they exchange.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod data;
pub mod plots;

pub use commands::{CheckpointMissing, Run};

/// Cap rayon's worker count from `GMETRO_NUM_WORKERS`. Must run before the
/// first parallel region; later calls are no-ops.
pub fn init_workers() {
    static ONCE: std::sync::OnceLock<()> = std::sync::OnceLock::new();
    ONCE.get_or_init(|| {
        let Ok(raw) = std::env::var("GMETRO_NUM_WORKERS") else {
            return;
        };
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring GMETRO_NUM_WORKERS={raw:?} (want a positive integer)"),
        }
    });
}
