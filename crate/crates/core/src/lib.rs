pub mod channels;
pub mod cli;
pub mod dilation;
pub mod error;
pub mod filtering;
pub mod fingerprint;
pub mod linalg;
pub mod measures;
pub mod reference;
pub mod report;
pub mod states;
pub mod verify;
