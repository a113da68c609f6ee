//! C ABI for the cubiform toolkit. Populated alongside the core crate.
