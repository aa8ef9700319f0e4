//! Storage-engine building blocks on top of asynchronous kernel I/O rings.

pub mod btree;
pub mod bufmgr;
pub mod cycles;
pub mod fiber;
pub mod perfmodel;
pub mod rt;
pub mod workload;
