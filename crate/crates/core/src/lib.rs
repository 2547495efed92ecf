//! Skyrelay: a metadata-only file agent that delegates heavyweight file
//! operations to worker instances coordinated by a trusted server.

pub mod agent;
pub mod clock;
pub mod coordinator;
pub mod domain;
pub mod harness;
pub mod encoding;
pub mod keying;
pub mod scheduler;
pub mod storage;
pub mod wire;
pub mod worker;

pub use domain::{
    classify_operation, compile_op_to_fois, validate_foi_sequence, Action, Category, CredentialSet, FileKind,
    FileMeta, Foi, FoiSequence, FoiVerb, InstanceMode, OpKind, OperationRequest,
};
