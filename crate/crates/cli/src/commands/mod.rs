pub mod critical;
pub mod report;
pub mod sweep;
pub mod tau;
pub mod train;
