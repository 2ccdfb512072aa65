pub mod error;
pub mod linalg;
pub mod seqspace;
pub mod dichotomy;
pub mod green;
pub mod shadow;
pub mod stability;
pub mod flow;
pub mod cli;
