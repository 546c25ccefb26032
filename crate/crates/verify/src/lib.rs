//! Holds the acceptance suite in `tests/acceptance.rs`. It is a separate
//! package so that it runs after the library and CLI tests.
