//! Library side of the command line front end: configuration, report
//! envelopes and the acceptance suite, shared between the binary and the
//! integration tests.

pub mod config;
pub mod report;
pub mod verify;
