//! Streaming STL layers from a design client to a manufacturer that slices,
//! validates, and prints each layer locally.

pub mod config;
pub mod corpus;
pub mod gcode;
pub mod geom2d;
pub mod mesh;
pub mod printer;
pub mod sectioner;
pub mod slicer;
pub mod support;
pub mod pipeline;
pub mod protocol;
pub mod report;
