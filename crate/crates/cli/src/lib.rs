// SPDX-License-Identifier: Apache-2.0

//! Library half of the `teeinfer` binary, so tests can drive every
//! subcommand in-process.

pub mod experiment;
pub mod live;
pub mod report;
