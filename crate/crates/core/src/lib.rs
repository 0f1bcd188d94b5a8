pub mod attacks;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod pipeline;
pub mod raster;
pub mod report;
pub mod tensor;
