//! Acceptance checks for the `diffjscc` crates; see `tests/acceptance.rs`.
