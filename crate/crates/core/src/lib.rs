pub mod autodiff;
pub mod renderer;
pub mod worldsim;
pub mod models;
pub mod contrastive;
pub mod datagen;
pub mod training;
pub mod eval;
pub mod planner;
pub mod cli;
