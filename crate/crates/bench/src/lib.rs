//! Shared fixtures for the benchmark targets live in the bench files.
