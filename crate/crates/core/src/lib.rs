//! Exceptional device access that requires custodian approval and the
//! physical cooperation of randomly selected peer devices.

pub mod analysis;
pub mod crypto;
pub mod custodian;
pub mod device;
pub mod lawenforcement;
pub mod merkle;
pub mod registry;
pub mod sim;
