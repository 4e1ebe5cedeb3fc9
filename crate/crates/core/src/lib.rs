//! Side-network fine-tuning workbench: a small reverse-mode autodiff engine
//! whose retention ledger doubles as a training-memory model, a toy vision
//! transformer, the compact side network, and the usual PETL baselines.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod csn;
pub mod data;
pub mod error;
pub mod manifest;
pub mod memory;
pub mod param;
pub mod optim;
pub mod petl;
pub mod report;
pub mod reuse;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{grad_check, GradCheckReport, GradStore, Graph, Mode, Node, Op, Var};
pub use error::{Error, Result};
pub use param::{Param, ParamLookup, ParamRole, ParamStore};
pub use tensor::{DType, Element, Tensor};
