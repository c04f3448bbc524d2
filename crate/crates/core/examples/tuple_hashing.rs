//! Canonical tuple hashing, diffs and alignment.

use ca_core::tuple::{aligned, diff_tuples};
use ca_core::{ArtifactVersionTuple, VersionPin};

fn main() -> ca_core::Result<()> {
    let a = ArtifactVersionTuple::baseline("c1", "d1", "y1", "x1");
    let shuffled = ArtifactVersionTuple::from_pins([
        VersionPin::new("data", "x1")?,
        VersionPin::new("deployment", "y1")?,
        VersionPin::new("code", "c1")?,
        VersionPin::new("dependencies", "d1")?,
    ])?;
    println!("canonical form: {}", String::from_utf8_lossy(&a.canonical_encode()?));
    println!("hash           {}", a.hash()?);
    println!("pin order does not matter: {}", a.hash()? == shuffled.hash()?);

    let mut b = a.clone();
    b.insert(VersionPin::new("data", "x2")?);
    println!("after data bump {}", b.hash()?);
    for change in diff_tuples(&a, &b) {
        println!("  diff: {}", serde_json::to_string(&change).unwrap());
    }
    println!("aligned (same components): {}", aligned(&a, &b));

    let mut c = a.clone();
    c.insert(VersionPin::new("xfeature_store", "f7")?);
    println!("aligned with an extra component: {}", aligned(&a, &c));
    Ok(())
}
