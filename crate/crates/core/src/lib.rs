//! A desk-scale PGAS one-sided communication runtime.
//!
//! Application units address each other's memory through [`GlobalPtr`]s and
//! issue blocking or non-blocking put/get operations. Each simulated node
//! hosts one or more hidden progress agents: large non-blocking transfers are
//! encoded as [`Packet`]s and handed to the origin's agent, which performs the
//! transfer on the origin's behalf and batches completion flushes in a FIFO
//! request queue. The origin is free to compute until it calls `wait`.
//!
//! Three progress modes are available (see [`ProgressMode`]):
//!
//! * `agent`: transfers above the routing threshold go through the agent and
//!   progress while the origin computes,
//! * `deferred`: nothing moves until the origin waits,
//! * `eager-direct`: the origin issues every transfer itself.
//!
//! Units are threads grouped into logical nodes. Intra-node copies are
//! immediate; inter-node transfers land after a latency/bandwidth cost model
//! delay (see [`transport`]).

pub mod config;
pub mod error;
pub mod memory;
pub mod progress;
pub mod rma;
pub mod runtime;
pub mod transport;

mod collective;

pub use config::{Config, ProgressMode};
pub use error::{Error, Result};
pub use memory::{DirectView, GlobalPtr, LocalView, RemoteDescriptor, SegmentInfo};
pub use progress::{AgentMetrics, Request};
pub use rma::{Handle, HandleId, OpKind, Packet, PutSource, PACKET_LEN};
pub use runtime::{FinalizeReport, Role, Runtime, Team, Topology, Unit, UnitId, TEAM_ALL};
pub use transport::{CtrlMessage, Header, LogEntry, LogKind, Tag, TransferToken, Transport};
