pub mod data;
pub mod diffcore;
pub mod eval;
pub mod model;
pub mod train;
pub mod cli;
