pub mod ad;
pub mod charts;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod flows;
pub mod math;
pub mod orderbook;
pub mod policy;
pub mod rng;
pub mod simulator;
pub mod valuation;
pub mod verify;
