pub mod audio;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod textnorm;
pub mod train;
pub mod verify;
