//! Leader-follower teleoperation stack with a simulated manipulator.

pub mod controller;
pub mod depthcodec;
pub mod dynamics;
pub mod geometry;
pub mod haptics;
pub mod leader;
pub mod netsim;
pub mod observer;
pub mod par;
pub mod session;
pub mod sweep;
pub mod ui_bridge;
