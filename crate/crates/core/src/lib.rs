pub mod autodiff;
pub mod corpus;
pub mod encoders;
pub mod evaluation;
pub mod par;
pub mod retrieval;
pub mod taxonomy;
pub mod training;
