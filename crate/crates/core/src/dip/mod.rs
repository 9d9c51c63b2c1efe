//! Deep-image-prior reconstruction: the hourglass network, its persisted
//! state, and the fitting loop.

mod config;
mod engine;
mod network;
mod state;

pub use config::DipConfig;
pub use engine::{
    l2_loss, perturb_input, reconstruct, reconstruct_with, snapshot_name, snapshot_path, Control,
    Observer, Passive, Reconstruction, ReconstructionTrace, RunOptions, Selection, TraceEntry,
    Verdict,
};
pub use network::Hourglass;
pub use state::{
    base_input, build_network, load_state, load_state_for, save_state, NetworkState,
    STATE_FORMAT_VERSION,
};
