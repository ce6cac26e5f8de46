//! Command line and HTTP service over a Trk trace store.

pub mod api;
pub mod cli;
pub mod request;
pub mod service;
