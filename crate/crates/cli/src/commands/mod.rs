pub mod eval;
pub mod prepare;
pub mod reconstruct;
pub mod selftest;
pub mod train;
