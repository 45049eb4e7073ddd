pub mod gradcheck;
pub mod probes;
