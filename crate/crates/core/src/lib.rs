pub mod augment;
pub mod data;
pub mod engine;
pub mod eval;
pub mod loss;
pub mod net;
pub mod seed;
pub mod trainer;
