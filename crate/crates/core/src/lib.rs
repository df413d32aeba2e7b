pub mod compute;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod selector;
pub mod text;
pub mod trainer;
pub mod variants;
