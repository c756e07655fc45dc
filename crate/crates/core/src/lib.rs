//! Symbolic metamodels built from parameterized primitive functions.
//!
//! A [`MetamodelTree`] is a layered Kolmogorov-superposition tree whose edges carry
//! small closed-form functions. Parameters are fitted by gradient descent and the
//! topology by a memetic search ([`run_smpf`]). A fitted tree renders to a readable
//! expression and yields exact input gradients for feature importance.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common `f64` case.

pub mod bench;
pub mod error;
pub mod evolve;
pub mod expr;
pub mod interpret;
pub mod optimize;
pub mod primitives;
pub mod scalar;
pub mod tree;

pub use bench::{find_target, r2, registry, run_experiment, RunReport, Source, TargetSpec};
pub use error::{Result, SmpfError};
pub use evolve::{run_smpf, run_smpf_observed, Generation, SmpfConfig, SmpfResult};
pub use expr::Expr;
pub use interpret::{gradient_at, hessian_at, rank_features, ImportanceReport};
pub use optimize::{fitness, mse, sample_batch, train_tree, Batch, Dataset, FitnessRecord, Oracle};
pub use primitives::{FunctionSet, PrimitiveClass, PrimitiveFunction};
pub use scalar::Scalar;
pub use tree::{Child, GradientTape, HiddenNode, MetamodelTree, Slot};

pub type Tree = MetamodelTree<f64>;
pub type Tree32 = MetamodelTree<f32>;
pub type Primitive = PrimitiveFunction<f64>;
pub type Primitive32 = PrimitiveFunction<f32>;
pub type Node = HiddenNode<f64>;
pub type Oracle64 = Oracle<f64>;
pub type Dataset64 = Dataset<f64>;
pub type Record = FitnessRecord<f64>;
pub type Report = ImportanceReport<f64>;
