//! Compiler toolchain for EVA programs: a vector-arithmetic DAG IR, the
//! rewrite passes that make it legal for RNS-CKKS (rescaling, modulus
//! switching, scale matching, relinearization), a constraint validator,
//! encryption-parameter selection, and a parallel reference executor.
//!
//! ```
//! use eva::{builder::ProgramBuilder, compile, CompileOptions};
//!
//! let mut b = ProgramBuilder::new(8);
//! let x = b.input(30.0);
//! let y = b.mul(x, x);
//! b.output(y, 30.0);
//! let out = compile(&b.build(), &CompileOptions::default()).unwrap();
//! assert_eq!(out.bit_sizes, vec![60, 60, 30]);
//! ```

pub mod builder;
pub mod dot;
pub mod error;
pub mod exec;
pub mod format;
pub mod gen;
pub mod ir;
pub mod meta;
pub mod params;
pub mod passes;
pub mod rewrite;
pub mod validate;

pub use error::{EvaError, Result};
pub use exec::{execute, ExecOptions, Inputs, InputValue, Mode, RunReport};
pub use format::{load_program, save_program};
pub use ir::{ChainElem, NodeId, ObjectType, OpCode, Program, RescaleChain, ValueType};
pub use params::{CompilationResult, ParamSummary};
pub use passes::{compile, CompileOptions, ModSwitchPolicy, RescalePolicy, WaterlineMode};
pub use validate::{validate, ValidateOptions, Violation};
