//! Conservative-progressive collaborative learning (CPCL) for semi-supervised
//! semantic segmentation, at desk scale.
//!
//! Two small per-pixel classifiers are co-trained. On unlabeled data their
//! weak-view predictions are split into agreement pixels (intersection pseudo
//! labels, supervising the conservative branch) and disagreement pixels that are
//! resolved with a class-wise disagreement indicator (union pseudo labels,
//! supervising the progressive branch). Each pseudo-labelled pixel is weighted
//! by prediction confidence.
//!
//! Module map:
//! - [`grid`]: dense tensors, label maps and the mix operator
//! - [`augment`]: CutMix rectangle masks
//! - [`network`]: conv net with manual backward, SGD with momentum, poly schedule
//! - [`pseudo`]: agreement matrix, disagreement indicator, pseudo-label composition
//! - [`loss`]: entropy, dynamic weights, supervised/unsupervised cross-entropy
//! - [`dataio`]: synthetic shapes dataset, partition protocol, on-disk format
//! - [`metrics`]: confusion matrix, IoU, group scores, overlap ratio
//! - [`trainer`]: supervised, CPCL and ablation steps, experiment runner
//! - [`config`]: flat dotted-key configuration overrides

pub mod augment;
pub mod config;
pub mod dataio;
pub mod error;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod pseudo;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{BinaryMap, GridTensor, LabelMap, MixMask, IGNORE};
