// SPDX-License-Identifier: Apache-2.0

pub mod buckets;
pub mod comm;
pub mod compare;
pub mod config;
pub mod par;
pub mod policy;
pub mod sim;
pub mod trainer;
pub mod types;
pub mod walkthrough;
