//! Record, inspect, replay and compare execution traces of programs written
//! in the Trk guest language.

pub mod compare;
pub mod demos;
pub mod guest;
pub mod host;
pub mod monitor;
pub mod replay;
pub mod store;
