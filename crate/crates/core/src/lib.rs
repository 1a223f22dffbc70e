pub mod evaluator;
pub mod phantom;
pub mod preprocess;
pub mod selftest;
pub mod tensor;
pub mod trainer;
pub mod unet;
