//! Functionality-aware 3D scene graphs.
//!
//! The crate turns posed RGB-D frames plus externally produced 2D detections
//! into a layered scene graph of objects and their functional interactive
//! elements (knobs, handles, buttons, ...), generates 2D detection datasets
//! from 3D-annotated scans, and evaluates segmentation and task-driven
//! affordance grounding.

pub mod affordance;
pub mod dataset;
pub mod detection;
pub mod eval;
pub mod gateway;
pub mod geom;
pub mod graph;
pub mod pipeline;
pub mod relations;
pub mod scene;
pub mod synth;
