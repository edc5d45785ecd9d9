//! Harness, reference oracle and criterion checks shared by test targets.
#![allow(dead_code)]

pub mod checks;
pub mod harness;
pub mod oracle;
