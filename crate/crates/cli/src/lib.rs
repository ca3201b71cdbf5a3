//! Library surface of the command-line tool: the run-manifest schema, shared
//! with integration tests.

pub mod manifest;
