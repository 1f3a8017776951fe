//! SMILES transformer with knowledge distillation from a graph transformer.

pub mod attention;
pub mod checkpoint;
pub mod distill;
pub mod embedding;
pub mod exec;
pub mod harness;
pub mod smiles;
pub mod teacher;
pub mod tensor;
