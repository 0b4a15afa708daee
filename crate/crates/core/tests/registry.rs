use std::collections::HashSet;
use std::fs;

use proptest::prelude::*;
use wibmark::registry::{sample_message, Registry, WatermarkMessage};
use wibmark::{Error, Rng};

#[test]
fn thousand_users_get_distinct_messages() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reg.jsonl");
    let mut reg = Registry::create(&path, 48).unwrap();
    let users: Vec<(String, String)> = (0..1000).map(|i| (format!("user-{i:04}"), String::new())).collect();
    reg.register_many(&users, &mut Rng::new(7)).unwrap();
    let distinct: HashSet<_> = reg.records().iter().map(|r| r.message.clone()).collect();
    assert_eq!(distinct.len(), 1000);
    assert!(reg.records().iter().all(|r| r.message.len() == 48));
}

#[test]
fn per_position_frequencies_look_fair() {
    // χ² over 48 positions with 1 dof each; the 99.9% quantile of χ²(48) is 84.0.
    let mut rng = Rng::new(11);
    let n = 100_000usize;
    let mut ones = [0usize; 48];
    for _ in 0..n {
        for (c, &b) in ones.iter_mut().zip(sample_message(48, &mut rng).unwrap().bits()) {
            *c += b as usize;
        }
    }
    let expected = n as f64 / 2.0;
    let chi2: f64 = ones.iter().map(|&c| (c as f64 - expected).powi(2) / expected * 2.0).sum();
    assert!(chi2 < 84.0, "chi2 = {chi2}");
    for &c in &ones {
        let mean = c as f64 / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "position mean {mean}");
    }
}

#[test]
fn file_round_trip_preserves_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reg.jsonl");
    let mut reg = Registry::create(&path, 20).unwrap();
    let mut rng = Rng::new(3);
    reg.register_with_note("alice", "first", &mut rng).unwrap();
    reg.register_user("bob", &mut rng).unwrap();
    let back = Registry::load(&path).unwrap();
    assert_eq!(back.records(), reg.records());
    assert_eq!(back.message_bits(), 20);
    reg.save().unwrap();
    assert_eq!(Registry::load(&path).unwrap().records(), reg.records());
}

#[test]
fn truncated_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reg.jsonl");
    let mut reg = Registry::create(&path, 16).unwrap();
    let mut rng = Rng::new(5);
    reg.register_user("a", &mut rng).unwrap();
    reg.register_user("b", &mut rng).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let cut = text.len() - 20;
    fs::write(&path, &text[..cut]).unwrap();
    match Registry::load(&path) {
        Err(Error::RegistryFormat { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn duplicate_user_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reg.jsonl");
    let mut reg = Registry::create(&path, 16).unwrap();
    let mut rng = Rng::new(9);
    reg.register_user("carol", &mut rng).unwrap();
    assert!(matches!(reg.register_user("carol", &mut rng), Err(Error::DuplicateUser(u)) if u == "carol"));
    assert_eq!(Registry::load(&path).unwrap().len(), 1);
}

#[test]
fn short_messages_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Registry::create(dir.path().join("r"), 4).is_err());
}

proptest! {
    #[test]
    fn hex_round_trip(bits in proptest::collection::vec(0u8..2, 8..80)) {
        let m = WatermarkMessage::new(bits.clone()).unwrap();
        let back = WatermarkMessage::from_hex(&m.to_hex(), bits.len()).unwrap();
        prop_assert_eq!(back.bits(), &bits[..]);
        prop_assert_eq!(m.to_hex().len(), bits.len().div_ceil(4));
    }

    #[test]
    fn binary_string_round_trip(bits in proptest::collection::vec(0u8..2, 1..80)) {
        let m = WatermarkMessage::new(bits).unwrap();
        prop_assert_eq!(WatermarkMessage::parse_binary(&m.to_binary_string()).unwrap(), m);
    }
}
