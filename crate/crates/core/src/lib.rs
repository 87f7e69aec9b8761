pub mod io;
pub mod model;
pub mod solver;
pub mod policies;
pub mod sim;
pub mod verify;
