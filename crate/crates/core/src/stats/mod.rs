pub mod distances;
pub mod ensemble;
pub mod estimators;
pub mod experiments;
pub mod gamma;
