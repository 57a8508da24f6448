//! Deterministic simulator for multi-robot task cooperation driven by a
//! hierarchy of robot needs.

pub mod cata;
pub mod comms;
pub mod energy;
pub mod engine;
pub mod formation;
pub mod generate;
pub mod geometry;
pub mod needs;
pub mod negotiation;
pub mod routing;
pub mod scenario;
pub mod selection;
pub mod sweep;
pub mod world;
