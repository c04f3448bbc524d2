//! Put an artifact, read it back, then corrupt the object file and watch
//! verification catch it.

use std::collections::BTreeMap;

use ca_core::{ArtifactKind, Error, Repository};

fn main() -> ca_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let repo = Repository::init(dir.path().join(".ca"))?;

    let labels = BTreeMap::from([("source".to_string(), "survey-2024".to_string())]);
    let id = repo.put_artifact(ArtifactKind::Data, b"id,score\n1,0.4\n2,0.9\n", "text/csv", labels)?;
    println!("stored   {id}");
    println!("content  {:?}", String::from_utf8_lossy(&repo.get_artifact(&id)?));

    let again = repo.put_artifact(ArtifactKind::Data, b"id,score\n1,0.4\n2,0.9\n", "text/csv", BTreeMap::new())?;
    println!("re-put gives the same id: {}", again == id);

    let path = repo.store().object_path(&id.hash);
    let mut bytes = std::fs::read(&path)?;
    bytes[0] ^= 0x01;
    std::fs::write(&path, bytes)?;

    println!("verify after flip: {}", repo.verify(&id)?);
    match repo.get_artifact(&id) {
        Err(e @ Error::IntegrityViolation { .. }) => println!("get refused: {e}"),
        other => println!("unexpected: {other:?}"),
    }
    Ok(())
}
