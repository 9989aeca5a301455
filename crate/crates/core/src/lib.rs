//! Core of the cooperative-driving stack: the bit-packed V2X wire codec,
//! seeded link impairment, vehicle kinematics and the MetaAction command
//! pipeline.
//!
//! Kinematic types are generic over the scalar ([`num::Real`]); the aliases
//! below fix the common choices.

pub mod agent;
pub mod link;
pub mod meta_action;
pub mod num;
pub mod time;
pub mod wire;

pub use num::Real;
pub use time::SimTime;

pub type VehicleStateF64 = agent::VehicleState<f64>;
pub type VehicleStateF32 = agent::VehicleState<f32>;
pub type ControlLawF64 = agent::ControlLaw<f64>;
pub type ControlLawF32 = agent::ControlLaw<f32>;
