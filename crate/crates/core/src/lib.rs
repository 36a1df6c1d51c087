//! Crowd-aware selective prediction.
//!
//! A base classifier's output distribution is compared with an estimate of
//! how a crowd of annotators would label the same sample; the model abstains
//! when the two are far apart (optionally also when the base distribution is
//! high-entropy). The crate provides:
//!
//! * [`annotations`]: records, hard/soft labels, agreement classes, JSONL
//!   datasets and seeded splits.
//! * [`distributions`]: KL, JSD, TVD, entropy, abstention scores and losses.
//! * [`estimator`]: small MLPs (per-annotator classifiers or a direct
//!   crowd regressor) and the panel aggregation strategies.
//! * [`selector`]: MaxProb, crowd-distance scores, temperature scaling and a
//!   correctness calibrator, all sharing a "higher keeps" convention.
//! * [`evaluation`]: threshold sweeps, Cov@Acc, AUC, AUROC, AUBS, ECE,
//!   Brier, macro-F1 and soft metrics.
//! * [`synthetic`]: a seeded generator of crowds and an overconfident base
//!   model.
//!
//! ```
//! use crowd_calib::distributions::{DistanceMetric, ScoreSpec};
//! use crowd_calib::prob::ProbDist;
//! use crowd_calib::selector::{crowd_calib_score, decide, Action};
//!
//! let crowd = ProbDist::new(vec![0.55, 0.45]).unwrap();
//! let base = ProbDist::new(vec![0.95, 0.05]).unwrap();
//! let spec = ScoreSpec::new(DistanceMetric::Jsd, true);
//! let score = crowd_calib_score("item-1", spec, &crowd, &base).unwrap();
//! assert_eq!(decide(&score, -0.2, &base).action, Action::Abstain);
//! ```

pub mod annotations;
pub mod distributions;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod prob;
pub mod selector;
pub mod synthetic;

pub use error::{Error, Result};
pub use prob::ProbDist;
