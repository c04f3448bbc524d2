//! Content-addressed, append-only artifact storage.
//!
//! Blobs live under `objects/<hh>/<rest>` keyed by the SHA-256 of their
//! bytes. Every artifact also gets one line in `index.jsonl`; the kind is part
//! of the identity, so the same bytes stored as `data` and as `result` are two
//! records sharing one blob file.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::repo::{self, Repository};

/// SHA-256 digest, rendered as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash([u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl FromStr for ContentHash {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(Error::Invalid(format!(
                "content hash must be 64 lowercase hex chars, got `{s}`"
            )));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).expect("validated hex");
        Ok(Self(out))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The six artifact families a run is built from and produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Data,
    Code,
    Dependency,
    Test,
    Deployment,
    Result,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 6] = [
        ArtifactKind::Data,
        ArtifactKind::Code,
        ArtifactKind::Dependency,
        ArtifactKind::Test,
        ArtifactKind::Deployment,
        ArtifactKind::Result,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Data => "data",
            ArtifactKind::Code => "code",
            ArtifactKind::Dependency => "dependency",
            ArtifactKind::Test => "test",
            ArtifactKind::Deployment => "deployment",
            ArtifactKind::Result => "result",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown artifact kind `{s}`")))
    }
}

/// Identity of a stored artifact. Textual form is `<kind>:<hash>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArtifactId {
    pub kind: ArtifactKind,
    pub hash: ContentHash,
}

impl ArtifactId {
    pub fn new(kind: ArtifactKind, hash: ContentHash) -> Self {
        Self { kind, hash }
    }
}

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.hash)
    }
}

impl FromStr for ArtifactId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, hash) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("artifact id must be `<kind>:<hash>`, got `{s}`")))?;
        Ok(Self::new(kind.parse()?, hash.parse()?))
    }
}

impl Serialize for ArtifactId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ArtifactId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub kind: ArtifactKind,
    pub hash: ContentHash,
    pub size: u64,
    pub media_type: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl ArtifactRecord {
    pub fn id(&self) -> ArtifactId {
        ArtifactId::new(self.kind, self.hash)
    }
}

#[derive(Default)]
struct IndexCache {
    records: Vec<ArtifactRecord>,
    by_id: HashMap<ArtifactId, usize>,
    offset: u64,
}

/// In-memory view of the artifact index, refreshed from `index.jsonl`
/// whenever the file has grown (possibly by another process).
pub struct Store {
    objects: PathBuf,
    index_path: PathBuf,
    cache: RwLock<IndexCache>,
}

impl Store {
    pub(crate) fn new(objects: PathBuf, index_path: PathBuf) -> Self {
        Self {
            objects,
            index_path,
            cache: RwLock::new(IndexCache::default()),
        }
    }

    /// Path of the blob file for `hash`.
    pub fn object_path(&self, hash: &ContentHash) -> PathBuf {
        let hex = hash.to_hex();
        self.objects.join(&hex[..2]).join(&hex[2..])
    }

    fn refresh(&self) -> Result<()> {
        let len = match fs::metadata(&self.index_path) {
            Ok(m) => m.len(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        if self.cache.read().unwrap_or_else(|p| p.into_inner()).offset == len {
            return Ok(());
        }
        let mut cache = self.cache.write().unwrap_or_else(|p| p.into_inner());
        if cache.offset >= len {
            return Ok(());
        }
        let mut f = File::open(&self.index_path)?;
        f.seek(SeekFrom::Start(cache.offset))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        let Some(last_nl) = buf.iter().rposition(|&b| b == b'\n') else {
            return Ok(());
        };
        for line in buf[..last_nl].split(|&b| b == b'\n') {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let rec: ArtifactRecord =
                serde_json::from_slice(line).map_err(|e| Error::corrupt(&self.index_path, e))?;
            let id = rec.id();
            if !cache.by_id.contains_key(&id) {
                let at = cache.records.len();
                cache.by_id.insert(id, at);
                cache.records.push(rec);
            }
        }
        cache.offset += last_nl as u64 + 1;
        Ok(())
    }

    pub fn record(&self, id: &ArtifactId) -> Result<Option<ArtifactRecord>> {
        self.refresh()?;
        let cache = self.cache.read().unwrap_or_else(|p| p.into_inner());
        Ok(cache.by_id.get(id).map(|&i| cache.records[i].clone()))
    }

    pub fn contains(&self, id: &ArtifactId) -> Result<bool> {
        Ok(self.record(id)?.is_some())
    }

    /// Finds a record with the given content hash, preferring `kind` when
    /// the same bytes were stored under several kinds.
    pub fn find_by_hash(
        &self,
        hash: &ContentHash,
        kind: Option<ArtifactKind>,
    ) -> Result<Option<ArtifactId>> {
        if let Some(kind) = kind {
            let id = ArtifactId::new(kind, *hash);
            if self.contains(&id)? {
                return Ok(Some(id));
            }
        }
        self.refresh()?;
        let cache = self.cache.read().unwrap_or_else(|p| p.into_inner());
        Ok(cache
            .records
            .iter()
            .map(ArtifactRecord::id)
            .filter(|id| id.hash == *hash)
            .min())
    }
}

impl Repository {
    /// Stores `bytes` as an artifact of `kind`. Re-putting the same bytes
    /// under the same kind returns the existing id and leaves the original
    /// record (labels included) untouched.
    pub fn put_artifact(
        &self,
        kind: ArtifactKind,
        bytes: &[u8],
        media_type: &str,
        labels: BTreeMap<String, String>,
    ) -> Result<ArtifactId> {
        if labels.keys().any(String::is_empty) {
            return Err(Error::Invalid("label keys must be nonempty".into()));
        }
        let id = ArtifactId::new(kind, ContentHash::of(bytes));
        let store = self.store();
        if store.contains(&id)? {
            return Ok(id);
        }
        let _guard = self.write_lock()?;
        if store.contains(&id)? {
            return Ok(id);
        }
        let path = store.object_path(&id.hash);
        if !path.is_file() {
            fs::create_dir_all(path.parent().expect("sharded path"))?;
            repo::write_atomic(&path, bytes)?;
        }
        let rec = ArtifactRecord {
            kind,
            hash: id.hash,
            size: bytes.len() as u64,
            media_type: media_type.to_string(),
            created_at: Utc::now(),
            labels,
        };
        repo::append_jsonl(&store.index_path, &rec)?;
        store.refresh()?;
        Ok(id)
    }

    /// Returns the artifact bytes after checking them against the digest.
    pub fn get_artifact(&self, id: &ArtifactId) -> Result<Vec<u8>> {
        let store = self.store();
        if !store.contains(id)? {
            return Err(Error::NotFound(format!("artifact {id}")));
        }
        let bytes = match fs::read(store.object_path(&id.hash)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(Error::MissingObject(id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let actual = ContentHash::of(&bytes);
        if actual != id.hash {
            return Err(Error::IntegrityViolation {
                id: id.to_string(),
                actual: actual.to_hex(),
            });
        }
        Ok(bytes)
    }

    /// True iff the stored blob still hashes to `id.hash`. A missing blob
    /// counts as a failed verification.
    pub fn verify(&self, id: &ArtifactId) -> Result<bool> {
        match self.get_artifact(id) {
            Ok(_) => Ok(true),
            Err(Error::IntegrityViolation { .. } | Error::MissingObject(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Records of `kind` (all kinds when `None`) carrying every label pair in
    /// `label_filter`, ordered by creation time then id.
    pub fn list_artifacts(
        &self,
        kind: Option<ArtifactKind>,
        label_filter: &BTreeMap<String, String>,
    ) -> Result<Vec<ArtifactRecord>> {
        let store = self.store();
        store.refresh()?;
        let cache = store.cache.read().unwrap_or_else(|p| p.into_inner());
        let mut out: Vec<ArtifactRecord> = cache
            .records
            .iter()
            .filter(|r| kind.is_none_or(|k| r.kind == k))
            .filter(|r| label_filter.iter().all(|(k, v)| r.labels.get(k) == Some(v)))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id().cmp(&b.id())));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repo() -> (tempfile::TempDir, Repository) {
        let dir = tempfile::tempdir().unwrap();
        let repo = Repository::init(dir.path().join(".ca")).unwrap();
        (dir, repo)
    }

    fn labels(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_blob_hashes_to_sha256_of_empty_input() {
        let (_d, repo) = repo();
        let id = repo
            .put_artifact(ArtifactKind::Data, b"", "text/plain", BTreeMap::new())
            .unwrap();
        assert_eq!(
            id.hash.to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let rec = repo.store().record(&id).unwrap().unwrap();
        assert_eq!(rec.size, 0);
        assert_eq!(repo.get_artifact(&id).unwrap(), b"");
    }

    #[test]
    fn reput_is_deduplicated() {
        let (_d, repo) = repo();
        let a = repo
            .put_artifact(ArtifactKind::Data, b"hello", "text/plain", BTreeMap::new())
            .unwrap();
        let b = repo
            .put_artifact(ArtifactKind::Data, b"hello", "text/plain", labels(&[("x", "y")]))
            .unwrap();
        assert_eq!(a, b);
        let all = repo.list_artifacts(None, &BTreeMap::new()).unwrap();
        assert_eq!(all.len(), 1);
        assert!(all[0].labels.is_empty(), "labels are fixed at first put");
        let index = fs::read_to_string(repo.path(repo::INDEX_FILE)).unwrap();
        assert_eq!(index.lines().count(), 1);
    }

    #[test]
    fn same_bytes_under_two_kinds_are_two_artifacts() {
        let (_d, repo) = repo();
        let a = repo
            .put_artifact(ArtifactKind::Data, b"x", "", BTreeMap::new())
            .unwrap();
        let b = repo
            .put_artifact(ArtifactKind::Result, b"x", "", BTreeMap::new())
            .unwrap();
        assert_ne!(a, b);
        assert_eq!(a.hash, b.hash);
        assert_eq!(repo.list_artifacts(None, &BTreeMap::new()).unwrap().len(), 2);
    }

    #[test]
    fn unknown_id_is_not_found() {
        let (_d, repo) = repo();
        let id = ArtifactId::new(ArtifactKind::Code, ContentHash::of(b"nope"));
        assert!(matches!(repo.get_artifact(&id), Err(Error::NotFound(_))));
        assert!(matches!(repo.verify(&id), Err(Error::NotFound(_))));
    }

    #[test]
    fn flipped_byte_is_detected() {
        let (_d, repo) = repo();
        let id = repo
            .put_artifact(ArtifactKind::Data, b"abcdef", "", BTreeMap::new())
            .unwrap();
        assert!(repo.verify(&id).unwrap());
        let path = repo.store().object_path(&id.hash);
        let mut bytes = fs::read(&path).unwrap();
        bytes[2] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert_ne!(ContentHash::of(&bytes), id.hash);
        assert!(!repo.verify(&id).unwrap());
        assert!(matches!(
            repo.get_artifact(&id),
            Err(Error::IntegrityViolation { .. })
        ));
    }

    #[test]
    fn deleted_blob_fails_verification() {
        let (_d, repo) = repo();
        let id = repo
            .put_artifact(ArtifactKind::Data, b"gone", "", BTreeMap::new())
            .unwrap();
        fs::remove_file(repo.store().object_path(&id.hash)).unwrap();
        assert!(!repo.verify(&id).unwrap());
        assert!(matches!(repo.get_artifact(&id), Err(Error::MissingObject(_))));
    }

    #[test]
    fn listing_filters_by_kind_and_labels() {
        let (_d, repo) = repo();
        assert!(repo.list_artifacts(None, &BTreeMap::new()).unwrap().is_empty());
        repo.put_artifact(ArtifactKind::Data, b"1", "", BTreeMap::new()).unwrap();
        repo.put_artifact(ArtifactKind::Data, b"2", "", BTreeMap::new()).unwrap();
        let r1 = repo
            .put_artifact(ArtifactKind::Result, b"{}", "application/json", labels(&[("run", "r1")]))
            .unwrap();
        repo.put_artifact(ArtifactKind::Result, b"[]", "application/json", labels(&[("run", "r2")]))
            .unwrap();
        assert_eq!(
            repo.list_artifacts(Some(ArtifactKind::Data), &BTreeMap::new())
                .unwrap()
                .len(),
            2
        );
        let only = repo
            .list_artifacts(Some(ArtifactKind::Result), &labels(&[("run", "r1")]))
            .unwrap();
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].id(), r1);
        let first = repo.list_artifacts(None, &BTreeMap::new()).unwrap();
        assert_eq!(first, repo.list_artifacts(None, &BTreeMap::new()).unwrap());
    }

    #[test]
    fn second_handle_sees_appends_from_first() {
        let (_d, repo) = repo();
        let other = Repository::open(repo.root()).unwrap();
        assert!(other.list_artifacts(None, &BTreeMap::new()).unwrap().is_empty());
        let id = repo.put_artifact(ArtifactKind::Test, b"t", "", BTreeMap::new()).unwrap();
        assert_eq!(other.get_artifact(&id).unwrap(), b"t");
    }

    #[test]
    fn id_text_roundtrip_and_rejects_garbage() {
        let id = ArtifactId::new(ArtifactKind::Deployment, ContentHash::of(b"img"));
        assert_eq!(id.to_string().parse::<ArtifactId>().unwrap(), id);
        assert!("data:XYZ".parse::<ArtifactId>().is_err());
        assert!("blob:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
            .parse::<ArtifactId>()
            .is_err());
        assert!(ContentHash::from_str(&"A".repeat(64)).is_err());
    }
}
