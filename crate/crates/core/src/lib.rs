pub mod endpoint;
pub mod evalharness;
pub mod hashing;
pub mod ingest;
pub mod mixer;
pub mod mock;
pub mod packer;
pub mod par;
pub mod pipeline;
pub mod transform;
