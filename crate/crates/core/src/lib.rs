pub mod bench;
pub mod config;
pub mod controller;
pub mod net;
pub mod node;
pub mod store;
pub mod verify;
pub mod wire;
