pub mod autodiff;
pub mod bench;
pub mod equivalence;
pub mod error;
pub mod feature_map;
pub mod linear_attention;
pub mod objective;
pub mod prefix_attention;
pub mod prompt;
pub mod set_disjointness;
pub mod tensor;
pub mod toy;
