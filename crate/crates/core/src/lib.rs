pub mod assoc;
pub mod blocks;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod model;
pub mod prepare;
pub mod scene;
pub mod signal;
pub mod synth;
pub mod train;
