#![allow(dead_code)]

pub mod checks;
pub mod gradsuite;
pub mod oracles;
