pub mod attack;
pub mod desk;
pub mod error;
pub mod harness;
pub mod imageops;
pub mod mixup;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod transforms;
