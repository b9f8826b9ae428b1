pub mod diff_engine;
pub mod ehr_data;
pub mod evaluation;
pub mod embeddings;
pub mod model;
pub mod ode_core;
pub mod training;
pub mod trajectory;
