pub mod data;
pub mod design;
pub mod ebal;
pub mod error;
pub mod glm;
pub mod linalg;
pub mod rbw;
pub mod ipw;
pub mod formula;
pub mod msm;
pub mod quadrature;
pub mod simulate;
pub mod cli;
