//! A miniature transactional page store with single-page failure detection
//! and recovery.

pub mod backup;
pub mod btree;
pub mod buffer;
pub mod device;
pub mod engine;
pub mod error;
pub mod events;
pub mod fault;
pub mod faultctl;
pub mod heap;
pub mod layout;
pub mod page;
pub mod pri;
pub mod recovery;
pub mod store;
pub mod txn;
pub mod wal;

pub use engine::{Config, Engine, Geometry, MemStorage, Storage};
pub use error::{Error, Result};
