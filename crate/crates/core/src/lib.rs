//! Multi-agent counseling runtime for emergency contraceptive pills.

pub mod agents;
pub mod clock;
pub mod graph;
pub mod harness;
pub mod kb;
pub mod lm;
pub mod matching;
pub mod session;
pub mod spec;
