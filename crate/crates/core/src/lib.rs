pub mod control;
pub mod csv;
pub mod expr;
pub mod functional;
pub mod homogenize;
pub mod mc;
pub mod model;
pub mod path;
pub mod pathopt;
pub mod ratefn;
pub mod selftest;
pub mod simulate;
pub mod torus;
