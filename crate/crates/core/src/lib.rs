pub mod cli;
pub mod config;
pub mod correlation;
pub mod evaluation;
pub mod numkit;
pub mod perception;
pub mod policy;
pub mod seed;
pub mod training;
pub mod worldsim;
