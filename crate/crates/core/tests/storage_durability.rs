mod common;

use common::storage;

#[test]
fn thousand_round_trips_are_bit_exact() {
    storage::roundtrips(1_000, 1).unwrap();
}

#[test]
fn one_corrupt_copy_is_recovered() {
    storage::corruption(300, 1, 2).unwrap();
}

#[test]
fn two_corrupt_copies_are_detected() {
    storage::corruption(300, 2, 3).unwrap();
}

#[test]
fn crash_before_rename_never_exposes_a_bad_image() {
    storage::crash_injection(300, 4).unwrap();
}
