//! Security assessment toolkit for OPC UA deployments.
//!
//! The crate bundles a minimal OPC UA binary-protocol stack (client and
//! server roles with pluggable certificate-trust behavior), the three
//! classic trust-management attacks against it (rogue server, rogue
//! client, middleperson), and a scenario harness that classifies a
//! deployment's trust configuration as vulnerable or secure.

pub mod client;
pub mod codec;
pub mod pki;
pub mod secchan;
pub mod transcript;
pub mod server;
pub mod transport;
pub mod status;

pub use status::StatusCode;
