//! Configuration, dispatch and output plumbing for the `snls` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
