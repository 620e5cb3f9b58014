//! File formats (stub)
