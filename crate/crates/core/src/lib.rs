pub mod area;
pub mod mitigation;
pub mod monitor;
pub mod netgen;
pub mod netmodel;
pub mod pac;
pub mod replay;
pub mod study;
pub mod update;
pub mod wire;
