//! Master–worker runtime: wire protocol, transports, and both roles.

mod master;
mod transport;
pub mod wire;
mod worker;

pub use master::{
    partition_data, run_pipeline, Diagnostics, PipelineConfig, PipelineResult, StepTiming,
    TransportChoice,
};
pub use transport::{Endpoint, InProcTransport, Meter, TcpTransport, Traffic, Transport};
pub use worker::serve;
