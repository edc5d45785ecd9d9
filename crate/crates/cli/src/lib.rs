//! Command-line front ends: `botforge` for operators and `tbc-db` for agents.

pub mod commands;
pub mod config;
pub mod tbc_db;
