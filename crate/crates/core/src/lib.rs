pub mod autodiff;
pub mod geometry;
pub mod tensor;
pub mod textproc;
pub mod model;
pub mod checkpoint;
pub mod synthpipe;
pub mod losses;
pub mod metrics;
pub mod inference;
pub mod training;
pub mod records;
pub mod runs;
