pub mod accel;
pub mod bench;
pub mod electrical;
pub mod gen;
pub mod graph;
pub mod ipm;
pub mod mixed;
pub mod oracle;
pub mod repair;
pub mod solve;
pub mod state;
