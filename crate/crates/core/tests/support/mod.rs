#![allow(dead_code)]

pub mod ppo;
