mod common;

use common::{check_malformed, check_nonsquare, check_valid, failures};

#[test]
fn valid_fixtures_round_trip_and_build() {
    let (n, bad) = failures("valid", check_valid);
    assert_eq!(n, 30);
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

#[test]
fn malformed_fixtures_report_positions() {
    let (n, bad) = failures("malformed", check_malformed);
    assert_eq!(n, 30);
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

#[test]
fn nonsquare_fixtures_are_rejected() {
    let (n, bad) = failures("nonsquare", check_nonsquare);
    assert_eq!(n, 5);
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}
