pub mod engine;
pub mod memory_model;
pub mod predictor;
pub mod scenarios;
pub mod secure_channel;
pub mod simulator;
pub mod validator;
pub mod workload;
