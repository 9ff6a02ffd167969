pub mod geometry;
pub mod propagation;
pub mod state;
pub mod dvl;
pub mod vision;
pub mod aware;
pub mod sim;
pub mod fusion;
pub mod eval;
