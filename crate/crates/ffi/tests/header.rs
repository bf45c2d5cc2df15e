//! The checked-in header must match what cbindgen generates from the source.
//! Run with `HARMORCH_BLESS=1` to rewrite it.

use std::path::Path;

#[test]
fn header_is_current() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).unwrap();
    let mut generated = Vec::new();
    cbindgen::Builder::new()
        .with_crate(dir)
        .with_config(config)
        .generate()
        .unwrap()
        .write(&mut generated);
    let path = dir.join("include/harmorch.h");
    if std::env::var_os("HARMORCH_BLESS").is_some() {
        std::fs::write(&path, &generated).unwrap();
    }
    let on_disk = std::fs::read(&path).unwrap_or_default();
    assert!(
        on_disk == generated,
        "include/harmorch.h is stale; rerun this test with HARMORCH_BLESS=1"
    );
}
