//! Multilinear compressive learning: separable tensor sensing, multilinear
//! feature synthesis and a small task network, plus a search engine that
//! ranks sensor configurations by the reconstruction error reached during
//! initialization and checks that ranking against classification error.
//!
//! ```
//! use mcl_core::tensor::{multilinear_map, DenseTensor, FactorMatrix, TensorShape};
//!
//! let y = DenseTensor::new(TensorShape::new(vec![3]).unwrap(), vec![1.0, 2.0, 3.0]).unwrap();
//! let phi = FactorMatrix::from_rows(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]).unwrap();
//! let z = multilinear_map(&y, &[phi]).unwrap();
//! assert_eq!(z.data(), &[4.0, 2.0]);
//! ```

pub mod data;
pub mod error;
pub mod head;
pub mod model;
pub mod optim;
pub mod search;
pub mod tensor;

pub use data::{
    load_dataset, make_synthetic, save_dataset, stratified_split, DatasetView, LabeledDataset,
    SplitIndices, SplitPart, SyntheticSpec,
};
pub use error::{Error, Result};
pub use head::{HeadConfig, TaskHead};
pub use model::{
    evaluate, init_hosvd, init_reconstruction, init_task_head, train_joint, Evaluation, MclModel,
    SensingOperator, SynthesisOperator,
};
pub use optim::{finite_diff_check, lr_at, AdamState, OptimizerConfig};
pub use search::{
    build_report, compression_rate, enumerate_grid, full_evaluate, pearson, rank_by_mse, spearman,
    surrogate_scan, ConfigGrid, ConfigPoint, CorrelationReport, EvalRecord, Fixture, SearchOptions,
};
pub use tensor::{downsample, frobenius_norm, hosvd, multilinear_map, DenseTensor, FactorMatrix, TensorShape};
