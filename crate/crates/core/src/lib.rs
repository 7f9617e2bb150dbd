pub mod error;
pub mod linalg;
pub mod lingauss;
pub mod costmodel;
pub mod localdyn;
pub mod ctrl;
pub mod envs;
pub mod persist;
pub mod nets;
pub mod svae;
pub mod mpc;
pub mod driver;
