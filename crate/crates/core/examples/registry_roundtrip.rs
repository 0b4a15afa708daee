//! Creates a user registry, registers a few users, reloads it from disk and
//! shows that every user keeps the same message.
//!
//! `cargo run --release --example registry_roundtrip -- [registry.jsonl]`

use wibmark::registry::Registry;
use wibmark::Rng;

fn main() -> wibmark::Result<()> {
    let dir = tempfile_dir();
    let path = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| dir.join("registry.jsonl"));
    let mut rng = Rng::new(7);

    let mut registry = Registry::create(&path, 48)?;
    for user in ["alice", "bob", "carol"] {
        let rec = registry.register_user(user, &mut rng)?;
        println!("{:<6} {}", rec.user_id, rec.message.to_hex());
    }
    // Duplicate ids are refused.
    match registry.register_user("alice", &mut rng) {
        Err(e) => println!("second alice rejected: {e}"),
        Ok(_) => println!("second alice accepted?"),
    }

    let reloaded = Registry::load(&path)?;
    assert_eq!(reloaded.records(), registry.records());
    let (a, b) = (&reloaded.records()[0].message, &reloaded.records()[1].message);
    println!(
        "reloaded {} users of {} bits from {}; alice and bob differ in {} bits",
        reloaded.len(),
        reloaded.message_bits(),
        path.display(),
        a.hamming(b)
    );
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("wibmark-registry-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}
