pub mod dataset;
pub mod geometry;
pub mod lane_graph;
pub mod model;
pub mod nn;
pub mod raster;
pub mod scalar;
pub mod simgen;
pub mod track;
pub mod train_eval;

pub type SapiNet32 = model::SapiNet<f32>;
pub type SapiNet64 = model::SapiNet<f64>;
pub type LstmBaseline32 = model::LstmBaseline<f32>;
pub type LstmBaseline64 = model::LstmBaseline<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
