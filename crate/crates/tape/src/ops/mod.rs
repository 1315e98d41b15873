mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod shape;

pub use nn::Conv1dGeometry;
