pub mod cost;
pub mod doc;
pub mod model;
pub mod optimize;
pub mod partition;
pub mod schedule;
pub mod sim;
pub mod verify;
