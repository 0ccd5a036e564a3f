#![allow(dead_code)]

pub mod engine_suites;
pub mod eval_oracle;
pub mod fixtures;
pub mod loss_oracle;
pub mod pairing;
pub mod partition;
pub mod oracles;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}
