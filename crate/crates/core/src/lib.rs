//! Relay placement planning over AS-level topologies and a simulation of
//! the switch-offloaded relay-node protocol.

pub mod attack_analysis;
pub mod chain;
pub mod client;
pub mod controller;
pub mod netsim;
pub mod placement;
pub mod routing;
pub mod sketch;
pub mod switch;
pub mod synthetic;
pub mod topology;
pub mod wire;
