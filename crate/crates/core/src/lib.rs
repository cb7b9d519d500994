pub mod analytics;
pub mod dirichlet;
pub mod error;
pub mod special;
pub mod theme;
pub mod estep;
pub mod io;
pub mod mstep;
pub mod net;
pub mod trainer;
