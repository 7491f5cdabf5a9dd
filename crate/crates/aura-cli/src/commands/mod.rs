pub mod compare;
pub mod eval;
pub mod preprocess;
pub mod train;
