//! Dynamically typed C/C++ semantics over a simulated low-fat heap.
//!
//! Every allocation carries a hidden header with its dynamic type and size.
//! Checks compare the static type of an address against the layout of that
//! dynamic type, yielding the bounds of the matching sub-object, so type
//! confusion, sub-object overflows and use-after-free show up as errors.

pub mod config;
pub mod corpus;
pub mod ir;
pub mod layout;
pub mod lowfat;
pub mod pipeline;
pub mod report;
pub mod runtime;
pub mod table;
pub mod types;

#[cfg(test)]
mod fixtures;

pub use config::Config;
pub use layout::{layout, type_bounds, SubObject};
pub use lowfat::{AbsBounds, AddressSpace, HeapError, SpaceConfig};
pub use table::{LayoutTable, RelBounds, TypeMeta, TypeRegistry};
pub use types::{RecordDecl, RecordKind, TypeId, TypeKind, TypeUniverse};
