use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use trapsift_core::fixture::{generate, FixtureSpec};

fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            walk(root, &p, out);
        } else {
            out.insert(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

#[test]
fn checked_in_fixture_matches_generator() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic-200");
    let fx = generate(&FixtureSpec::default());
    let mut on_disk = BTreeSet::new();
    walk(&root, &root, &mut on_disk);
    let generated: BTreeSet<PathBuf> = fx.files.keys().cloned().collect();
    assert_eq!(on_disk, generated, "file sets differ; rerun the make_fixture example");
    for (rel, text) in &fx.files {
        let disk = std::fs::read(root.join(rel)).unwrap();
        assert!(disk == text.as_bytes(), "{} differs from generator output", rel.display());
    }
}
