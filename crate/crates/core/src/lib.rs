pub mod cam;
pub mod evaluator;
pub mod losses;
pub mod nn;
pub mod pnm;
pub mod sampler;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod types;
