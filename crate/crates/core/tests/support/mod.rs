#![allow(dead_code)]

pub mod clock_oracle;
pub mod sched_oracle;
pub mod tree_oracle;
