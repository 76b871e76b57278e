pub mod formulas;
pub mod labeling;
pub mod soundness;
