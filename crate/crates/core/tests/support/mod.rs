#![allow(dead_code)]

pub mod folding;
pub mod gradcheck;
pub mod tables;
