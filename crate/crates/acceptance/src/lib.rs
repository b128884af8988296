//! Holds the `acceptance` test target. Run it with
//! `cargo test -p polyrag-acceptance --test acceptance`; it prints one
//! PASS or FAIL line per criterion and fails if any criterion fails.
