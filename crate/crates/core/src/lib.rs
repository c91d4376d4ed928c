//! Event-driven spiking-network toolkit for AER vision datasets: a bit-exact
//! N-MNIST codec, saccade/polarity preprocessing, a two-layer LIF
//! winner-take-all network with threshold homeostasis, three unsupervised
//! learning rules (trace STDP, fixed-post-time STDP, PSTH-derived STDP),
//! training/evaluation orchestration and design-space exploration.

pub mod aer;
pub mod checkpoint;
pub mod config;
pub mod dse;
pub mod network;
pub mod plasticity;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use aer::{
    decode_events, encode_events, index_dataset, DatasetIndex, Event, EventStream, Polarity,
    Split,
};
pub use config::{GridSpec, RunConfig};
pub use dse::{DseGrid, DseResult, RefineSpans, Span};
pub use network::{
    kernel_value, present_pattern, reset_transient, HomeostasisParams, KernelParams, LifParams,
    NetworkConfig, NetworkError, NetworkState, PresentOpts, PresentationResult,
};
pub use plasticity::{PlasticityMode, PlasticityParams, TraceState};
pub use preprocess::{
    collapse, compute_psth, export_frame_pgm, slice_saccade, CollapseMethod, CollapsedFrame,
    Pattern, PsthTable,
};
pub use rng::derive_seed;
pub use trainer::{
    assign_labels, ensemble_predict, evaluate, train, weight_histogram, EvalReport, Model,
    Session, TrainerError,
};
