//! Core library for a confidential-container control plane simulation:
//! a software security processor, role PKI, sealed container images,
//! measured boot, authenticated channels, and the actors that tie them
//! together. Everything is deterministic under a seed and runs without
//! hardware support.

pub mod actors;
pub mod boot;
pub mod channel;
pub mod crypto;
pub mod fixtures;
pub mod image;
pub mod net;
pub mod pki;
pub mod proto;
pub mod sclib;
pub mod sim;
pub mod tee;
pub mod wire;
