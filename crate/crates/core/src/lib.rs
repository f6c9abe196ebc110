pub mod cases;
pub mod central;
pub mod formulation;
pub mod mpc;
pub mod ocd;
pub mod partition;
pub mod sparse;
pub mod system;
#[cfg(test)]
mod testkit;
