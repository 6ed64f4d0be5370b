#![allow(dead_code)]

pub mod durations;
pub mod proto_model;
pub mod sched_oracle;
pub mod storage;
pub mod timeline;
pub mod transparency;
