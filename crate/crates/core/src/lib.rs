pub mod bootstrap;
pub mod cli;
pub mod data;
pub mod error;
pub mod learners;
pub mod longitudinal;
pub mod meta;
pub mod nuisance;
pub mod pseudo;
pub mod seed;
pub mod sim;
pub mod stats;
pub mod targeting;
