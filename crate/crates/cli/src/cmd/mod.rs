pub mod cost;
pub mod drift;
pub mod sensitivity;
pub mod train;
pub mod verify;
