pub mod audit;
pub mod auth;
pub mod behaviors;
pub mod clock;
pub mod domain;
pub mod fixture;
pub mod kinds;
pub mod platform;
pub mod protocol;
pub mod runtime;
pub mod store;
