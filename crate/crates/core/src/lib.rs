//! Hierarchical count-and-gap modelling of TV viewing journeys, with
//! behaviour profiling, clustering and churn classification.

pub mod classify;
pub mod cluster;
pub mod event_log;
pub mod features;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod simulate;
