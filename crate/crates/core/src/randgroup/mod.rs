//! Random grouping plans.
//!
//! A plan stores one random value per token and head, sorts tokens by value
//! in descending order and cuts the sorted sequence into equal groups. When
//! the token count is not a multiple of the group size, synthetic padding
//! slots are appended after the real tokens so every group keeps the same
//! size; attention masks those slots out.

mod interp;
mod io;
mod mode;
mod plan;
mod sort;

pub use interp::{interpolate_plan, nearest_source, resample_nearest};
pub use io::{deserialize_plan, serialize_plan, MAGIC, VERSION};
pub use mode::{GroupingMode, DEFAULT_REGION_OVERLAP};
pub use plan::{assignment_of, generate_plan, resample_per_sample, GroupAssignment, GroupPlan};
pub use sort::descending_argsort;

#[cfg(test)]
mod tests;
