//! Subject database: stable hierarchical identifiers, per-turn captions and
//! locked feature embeddings for every subject and component seen in a session.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::agents::ManagerSubjectEntry;

/// Version of the `db.json` document layout.
pub const DB_SCHEMA_VERSION: u32 = 1;
pub const DB_FILE_NAME: &str = "db.json";
pub const DEFAULT_MAX_COMPONENTS: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("malformed subject id {0:?}")]
    MalformedId(String),
    #[error("component {0} registered before its parent")]
    OrphanComponent(SubjectId),
    #[error("unknown subject id {0}")]
    UnknownId(SubjectId),
    #[error("embedding for {0} is already locked")]
    AlreadyLocked(SubjectId),
    #[error("subject {id} would have {count} components (maximum {max})")]
    TooManyComponents { id: SubjectId, count: usize, max: usize },
    #[error("embedding dimension {got} differs from {expected} used by other {provenance:?} embeddings")]
    DimensionMismatch { provenance: Provenance, expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFiniteEmbedding,
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("snapshot schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
}

/// Dash-joined hierarchical identifier: `"3"` for a subject, `"3-2"` for one of its components.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubjectId(Vec<u32>);

impl SubjectId {
    pub fn subject(n: u32) -> Self {
        assert!(n > 0, "subject ids are positive");
        Self(vec![n])
    }

    pub fn component(parent: u32, n: u32) -> Self {
        assert!(parent > 0 && n > 0, "subject ids are positive");
        Self(vec![parent, n])
    }

    pub fn path(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn is_component(&self) -> bool {
        self.0.len() == 2
    }

    /// Top-level number of the subject this id belongs to.
    pub fn top_level(&self) -> u32 {
        self.0[0]
    }

    pub fn parent(&self) -> Option<SubjectId> {
        self.is_component().then(|| SubjectId(vec![self.0[0]]))
    }

    pub fn child(&self, n: u32) -> Option<SubjectId> {
        (!self.is_component() && n > 0).then(|| SubjectId(vec![self.0[0], n]))
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0.as_slice() {
            [a] => write!(f, "{a}"),
            [a, b] => write!(f, "{a}-{b}"),
            _ => unreachable!("depth is 1 or 2"),
        }
    }
}

impl FromStr for SubjectId {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RegistryError::MalformedId(s.to_string());
        let parts: Vec<&str> = s.split('-').collect();
        if parts.is_empty() || parts.len() > 2 {
            return Err(bad());
        }
        let mut path = Vec::with_capacity(parts.len());
        for p in parts {
            // Reject signs, whitespace and leading zeros so rendering round-trips.
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) || (p.len() > 1 && p.starts_with('0')) {
                return Err(bad());
            }
            let n: u32 = p.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            path.push(n);
        }
        Ok(SubjectId(path))
    }
}

impl Serialize for SubjectId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SubjectId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ToyEncoder,
    Bridge,
    UserReference,
}

/// Image-feature vector for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub dim: usize,
    pub provenance: Provenance,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provenance: Provenance) -> Self {
        let dim = values.len();
        Self { values, dim, provenance }
    }

    fn check(&self) -> Result<(), RegistryError> {
        if self.dim != self.values.len() || self.dim == 0 || self.values.iter().any(|v| !v.is_finite()) {
            return Err(RegistryError::NonFiniteEmbedding);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: SubjectId,
    pub name: String,
    pub caption_by_turn: BTreeMap<u32, String>,
    pub embedding: Option<EmbeddingVector>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<SubjectRecord>,
}

impl SubjectRecord {
    fn new(id: SubjectId, caption: &str, turn: u32) -> Self {
        Self {
            id,
            name: name_from_caption(caption),
            caption_by_turn: BTreeMap::from([(turn, caption.to_string())]),
            embedding: None,
            components: Vec::new(),
        }
    }

    pub fn latest_caption(&self) -> Option<&str> {
        self.caption_by_turn.values().next_back().map(String::as_str)
    }
}

/// Short noun phrase: the naming segment of a caption.
fn name_from_caption(caption: &str) -> String {
    caption.split(',').next().unwrap_or_default().trim().to_string()
}

/// The session's subject database. Top-level records own their components,
/// so a component can never exist without its parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDatabase {
    records: BTreeMap<SubjectId, SubjectRecord>,
    next_top_level_id: u32,
    #[serde(default = "default_max_components")]
    max_components: usize,
}

fn default_max_components() -> usize {
    DEFAULT_MAX_COMPONENTS
}

impl Default for SubjectDatabase {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    schema_version: u32,
    database: SubjectDatabase,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

impl SubjectDatabase {
    pub fn new() -> Self {
        Self::with_max_components(DEFAULT_MAX_COMPONENTS)
    }

    pub fn with_max_components(max_components: usize) -> Self {
        Self { records: BTreeMap::new(), next_top_level_id: 1, max_components }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Next id a brand-new subject would receive.
    pub fn next_top_level_id(&self) -> u32 {
        self.next_top_level_id
    }

    pub fn subjects(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.records.values()
    }

    pub fn get(&self, id: &SubjectId) -> Option<&SubjectRecord> {
        let top = self.records.get(&SubjectId(vec![id.top_level()]))?;
        if id.is_component() {
            top.components.iter().find(|c| &c.id == id)
        } else {
            Some(top)
        }
    }

    fn get_mut(&mut self, id: &SubjectId) -> Option<&mut SubjectRecord> {
        let top = self.records.get_mut(&SubjectId(vec![id.top_level()]))?;
        if id.is_component() {
            top.components.iter_mut().find(|c| &c.id == id)
        } else {
            Some(top)
        }
    }

    pub fn contains(&self, id: &SubjectId) -> bool {
        self.get(id).is_some()
    }

    /// Records the entry (and its components) at `turn`. Existing ids gain a caption
    /// for this turn; unseen ids are created without an embedding.
    pub fn register(&mut self, entry: &ManagerSubjectEntry, turn: u32) -> Result<SubjectId, RegistryError> {
        let id: SubjectId = entry.id.clone();
        if id.is_component() && !self.contains(&id.parent().expect("component has parent")) {
            return Err(RegistryError::OrphanComponent(id));
        }
        if !id.is_component() {
            let new_components = entry
                .components
                .iter()
                .filter(|c| !self.contains(&c.id))
                .count();
            let existing = self.get(&id).map_or(0, |r| r.components.len());
            if existing + new_components > self.max_components {
                return Err(RegistryError::TooManyComponents {
                    id,
                    count: existing + new_components,
                    max: self.max_components,
                });
            }
            for c in &entry.components {
                if c.id.parent().as_ref() != Some(&id) {
                    return Err(RegistryError::MalformedId(c.id.to_string()));
                }
            }
        }
        self.upsert(&id, &entry.caption, turn)?;
        for c in &entry.components {
            self.upsert(&c.id, &c.caption, turn)?;
        }
        Ok(id)
    }

    fn upsert(&mut self, id: &SubjectId, caption: &str, turn: u32) -> Result<(), RegistryError> {
        if let Some(rec) = self.get_mut(id) {
            rec.caption_by_turn.insert(turn, caption.to_string());
            return Ok(());
        }
        let record = SubjectRecord::new(id.clone(), caption, turn);
        if let Some(parent) = id.parent() {
            let max = self.max_components;
            let p = self.get_mut(&parent).ok_or_else(|| RegistryError::OrphanComponent(id.clone()))?;
            if p.components.len() >= max {
                return Err(RegistryError::TooManyComponents { id: parent, count: p.components.len() + 1, max });
            }
            p.components.push(record);
            p.components.sort_by(|a, b| a.id.cmp(&b.id));
        } else {
            self.next_top_level_id = self.next_top_level_id.max(id.top_level() + 1);
            self.records.insert(id.clone(), record);
        }
        Ok(())
    }

    /// Stores `vec` as the subject's image features. A locked embedding can only be
    /// replaced by a user-provided reference.
    pub fn lock_embedding(&mut self, id: &SubjectId, vec: EmbeddingVector) -> Result<(), RegistryError> {
        vec.check()?;
        self.check_dim(id, &vec)?;
        let rec = self.get_mut(id).ok_or_else(|| RegistryError::UnknownId(id.clone()))?;
        match &rec.embedding {
            Some(_) if vec.provenance != Provenance::UserReference => Err(RegistryError::AlreadyLocked(id.clone())),
            _ => {
                rec.embedding = Some(vec);
                Ok(())
            }
        }
    }

    /// Explicit edit-with-regeneration: replaces whatever embedding is stored.
    pub fn replace_embedding(&mut self, id: &SubjectId, vec: EmbeddingVector) -> Result<(), RegistryError> {
        vec.check()?;
        self.check_dim(id, &vec)?;
        let rec = self.get_mut(id).ok_or_else(|| RegistryError::UnknownId(id.clone()))?;
        rec.embedding = Some(vec);
        Ok(())
    }

    fn check_dim(&self, target: &SubjectId, vec: &EmbeddingVector) -> Result<(), RegistryError> {
        let others = self
            .records
            .values()
            .flat_map(|r| std::iter::once(r).chain(r.components.iter()))
            .filter(|r| &r.id != target)
            .filter_map(|r| r.embedding.as_ref())
            .find(|e| e.provenance == vec.provenance);
        match others {
            Some(e) if e.dim != vec.dim => Err(RegistryError::DimensionMismatch {
                provenance: vec.provenance,
                expected: e.dim,
                got: vec.dim,
            }),
            _ => Ok(()),
        }
    }

    /// Writes `db.json` into `dir` (write-temp-rename).
    pub fn snapshot(&self, dir: &Path) -> Result<PathBuf, RegistryError> {
        let path = dir.join(DB_FILE_NAME);
        let doc = Snapshot { schema_version: DB_SCHEMA_VERSION, database: self.clone() };
        let bytes = serde_json::to_vec_pretty(&doc).expect("database serializes");
        crate::fsutil::write_atomic(&path, &bytes).map_err(|source| RegistryError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self, RegistryError> {
        let path = dir.join(DB_FILE_NAME);
        let io_err = |source: io::Error| RegistryError::Io { path: path.clone(), source };
        let bytes = fs::read(&path).map_err(io_err)?;
        let probe: VersionProbe = serde_json::from_slice(&bytes)
            .map_err(|e| io_err(io::Error::new(io::ErrorKind::InvalidData, e)))?;
        if probe.schema_version != DB_SCHEMA_VERSION {
            return Err(RegistryError::SchemaVersionMismatch { found: probe.schema_version, expected: DB_SCHEMA_VERSION });
        }
        let doc: Snapshot = serde_json::from_slice(&bytes)
            .map_err(|e| io_err(io::Error::new(io::ErrorKind::InvalidData, e)))?;
        Ok(doc.database)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{ManagerComponentEntry, ManagerSubjectEntry};
    use proptest::prelude::*;

    fn entry(id: &str, caption: &str) -> ManagerSubjectEntry {
        ManagerSubjectEntry { id: id.parse().unwrap(), caption: caption.into(), components: vec![] }
    }

    fn toy_vec(seed: f64, dim: usize) -> EmbeddingVector {
        EmbeddingVector::new((0..dim).map(|i| (i as f64 * seed).sin()).collect(), Provenance::ToyEncoder)
    }

    #[test]
    fn id_parsing() {
        assert_eq!("3-2".parse::<SubjectId>().unwrap().path(), &[3, 2]);
        for bad in ["", "a", "1-", "-1", "0", "1-0", "01", "1-2-3", " 1", "+1", "1.5"] {
            assert!(matches!(bad.parse::<SubjectId>(), Err(RegistryError::MalformedId(_))), "{bad}");
        }
    }

    #[test]
    fn register_new_and_existing() {
        let mut db = SubjectDatabase::new();
        let id = db.register(&entry("1", "house"), 1).unwrap();
        assert_eq!(id.to_string(), "1");
        let rec = db.get(&id).unwrap();
        assert_eq!(rec.embedding, None);
        assert_eq!(rec.name, "house");

        db.register(&entry("1", "house, red house, the house at dusk"), 2).unwrap();
        assert_eq!(db.get(&id).unwrap().caption_by_turn.len(), 2);
        assert_eq!(db.len(), 1);
        assert_eq!(db.next_top_level_id(), 2);
    }

    #[test]
    fn orphan_component_rejected() {
        let mut db = SubjectDatabase::new();
        let err = db.register(&entry("1-2", "roof, red roof, tiles"), 1).unwrap_err();
        assert!(matches!(err, RegistryError::OrphanComponent(_)));
    }

    #[test]
    fn nested_components_registered_under_parent() {
        let mut db = SubjectDatabase::new();
        let e = ManagerSubjectEntry {
            id: "1".parse().unwrap(),
            caption: "dog".into(),
            components: vec![
                ManagerComponentEntry { id: "1-1".parse().unwrap(), caption: "head, dog head, wags".into() },
                ManagerComponentEntry { id: "1-2".parse().unwrap(), caption: "tail, dog tail, wags".into() },
            ],
        };
        db.register(&e, 1).unwrap();
        assert!(db.contains(&"1-2".parse().unwrap()));
        // Component entries may also arrive on their own once the parent exists.
        db.register(&entry("1-3", "torso, dog torso, fluffy"), 2).unwrap();
        assert_eq!(db.get(&SubjectId::subject(1)).unwrap().components.len(), 3);
    }

    #[test]
    fn component_limit_enforced() {
        let mut db = SubjectDatabase::with_max_components(2);
        let e = ManagerSubjectEntry {
            id: "1".parse().unwrap(),
            caption: "dog".into(),
            components: (1..=3)
                .map(|j| ManagerComponentEntry { id: SubjectId::component(1, j), caption: "a, b, c".into() })
                .collect(),
        };
        assert!(matches!(db.register(&e, 1), Err(RegistryError::TooManyComponents { .. })));
        assert!(db.is_empty());
    }

    #[test]
    fn lock_policy() {
        let mut db = SubjectDatabase::new();
        db.register(&entry("1", "house"), 1).unwrap();
        let id = SubjectId::subject(1);
        let v = toy_vec(0.3, 64);
        db.lock_embedding(&id, v.clone()).unwrap();
        assert_eq!(db.get(&id).unwrap().embedding.as_ref().unwrap(), &v);

        let err = db.lock_embedding(&id, toy_vec(0.7, 64)).unwrap_err();
        assert!(matches!(err, RegistryError::AlreadyLocked(_)));

        let user = EmbeddingVector::new(vec![1.0; 32], Provenance::UserReference);
        db.lock_embedding(&id, user.clone()).unwrap();
        assert_eq!(db.get(&id).unwrap().embedding.as_ref().unwrap(), &user);

        assert!(matches!(
            db.lock_embedding(&SubjectId::subject(9), toy_vec(0.1, 64)),
            Err(RegistryError::UnknownId(_))
        ));
    }

    #[test]
    fn lock_rejects_mismatched_dim_and_nan() {
        let mut db = SubjectDatabase::new();
        db.register(&entry("1", "dog"), 1).unwrap();
        db.register(&entry("2", "cat"), 1).unwrap();
        db.lock_embedding(&SubjectId::subject(1), toy_vec(0.3, 16)).unwrap();
        assert!(matches!(
            db.lock_embedding(&SubjectId::subject(2), toy_vec(0.3, 8)),
            Err(RegistryError::DimensionMismatch { .. })
        ));
        let nan = EmbeddingVector::new(vec![f64::NAN; 16], Provenance::ToyEncoder);
        assert!(matches!(db.lock_embedding(&SubjectId::subject(2), nan), Err(RegistryError::NonFiniteEmbedding)));
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let empty = SubjectDatabase::new();
        empty.snapshot(dir.path()).unwrap();
        assert_eq!(SubjectDatabase::load(dir.path()).unwrap(), empty);

        let mut db = SubjectDatabase::new();
        for (i, name) in ["girl", "dog", "house"].iter().enumerate() {
            db.register(&entry(&(i + 1).to_string(), name), 1).unwrap();
        }
        db.lock_embedding(&SubjectId::subject(1), toy_vec(0.123456789, 16)).unwrap();
        db.lock_embedding(&SubjectId::subject(3), toy_vec(1.0 / 3.0, 16)).unwrap();
        db.snapshot(dir.path()).unwrap();
        assert_eq!(SubjectDatabase::load(dir.path()).unwrap(), db);
    }

    #[test]
    fn load_of_truncated_file_is_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut db = SubjectDatabase::new();
        db.register(&entry("1", "dog"), 1).unwrap();
        let path = db.snapshot(dir.path()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(SubjectDatabase::load(dir.path()), Err(RegistryError::Io { .. })));
    }

    #[test]
    fn load_rejects_other_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(DB_FILE_NAME), br#"{"schema_version": 99, "database": {}}"#).unwrap();
        assert!(matches!(
            SubjectDatabase::load(dir.path()),
            Err(RegistryError::SchemaVersionMismatch { found: 99, .. })
        ));
    }

    proptest! {
        #[test]
        fn id_render_parse_round_trip(a in 1u32..100_000, b in proptest::option::of(1u32..1000)) {
            let s = match b { Some(b) => format!("{a}-{b}"), None => a.to_string() };
            let id: SubjectId = s.parse().unwrap();
            prop_assert_eq!(id.to_string(), s);
        }

        #[test]
        fn id_parser_is_total(s in "\\PC{0,12}") {
            let _ = s.parse::<SubjectId>();
        }
    }
}
