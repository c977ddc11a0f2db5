pub mod assembly;
pub mod cheb;
pub mod fmm;
pub mod kernel;
pub mod mesh;
pub mod quad;
pub mod runtime;
pub mod schedule;
pub mod trace;
pub mod transport;
pub mod tree;
pub mod vec3;
