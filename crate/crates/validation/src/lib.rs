//! Holds the `acceptance` test target. Run it with
//! `cargo test -p pic-validation --test acceptance`.
