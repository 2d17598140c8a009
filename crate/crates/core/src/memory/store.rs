//! Run directory persistence. Every file is written to a temporary name and
//! renamed into place; `index.json` is written last, so a crash leaves at most
//! an unindexed orphan that loading ignores.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DiagnosisRecord, EpisodeOutcome, StepRecord};
use crate::raster::RgbdImage;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unreadable index {path}: {message}")]
    Index { path: PathBuf, message: String },
    #[error("cannot serialize {what}: {message}")]
    Encode { what: String, message: String },
    #[error("episode {got} recorded out of order, expected {expected}")]
    OutOfOrder { expected: u32, got: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_json<T: Serialize + ?Sized>(what: &str, value: &T) -> Result<Vec<u8>, StoreError> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Encode {
        what: what.into(),
        message: e.to_string(),
    })?;
    v.push(b'\n');
    Ok(v)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Index {
    episodes: Vec<u32>,
    controllers: Vec<u32>,
    diagnoses: Vec<u32>,
}

/// Single writer over a run directory.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    index: Index,
}

fn episode_dir(root: &Path, idx: u32) -> PathBuf {
    root.join("episodes").join(format!("{idx:03}"))
}

fn read_index(root: &Path) -> Result<Index, StoreError> {
    let path = root.join("index.json");
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Index {
            path,
            message: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Index::default()),
        Err(e) => Err(StoreError::Index {
            path,
            message: e.to_string(),
        }),
    }
}

/// Phase name reduced to characters safe in file names.
fn file_safe(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(32)
        .collect();
    if s.is_empty() {
        "unnamed".into()
    } else {
        s
    }
}

impl RunStore {
    /// Opens a run directory, creating it when absent. `config.json` is written
    /// only if the directory does not already have one.
    pub fn open<C: Serialize>(root: impl Into<PathBuf>, config: &C) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let index = read_index(&root)?;
        let cfg = root.join("config.json");
        if !cfg.exists() {
            write_atomic(&cfg, &to_json("config", config)?)?;
        }
        Ok(Self { root, index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn episode_count(&self) -> u32 {
        self.index.episodes.len() as u32
    }

    pub fn latest_controller(&self) -> Option<u32> {
        self.index.controllers.last().copied()
    }

    pub fn diagnosis_count(&self) -> u32 {
        self.index.diagnoses.len() as u32
    }

    fn commit_index(&self) -> Result<(), StoreError> {
        write_atomic(&self.root.join("index.json"), &to_json("index", &self.index)?)
    }

    /// Stores an episode and its key frames, then indexes it. Fills in
    /// `keyframe_refs` with run-relative paths and returns the stored outcome.
    pub fn record_episode(
        &mut self,
        mut outcome: EpisodeOutcome,
        trace: &[StepRecord],
        frames: &[(u32, String, RgbdImage)],
    ) -> Result<EpisodeOutcome, StoreError> {
        let expected = self.episode_count();
        if outcome.episode_index != expected {
            return Err(StoreError::OutOfOrder {
                expected,
                got: outcome.episode_index,
            });
        }
        let dir = episode_dir(&self.root, expected);
        // Anything here is left over from an interrupted session.
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        outcome.keyframe_refs.clear();
        for (step, phase, img) in frames {
            let name = format!("{step:03}_{}.ppm", file_safe(phase));
            let rel = format!("episodes/{expected:03}/frames/{name}");
            write_atomic(&self.root.join(&rel), &img.to_top_down().to_ppm())?;
            outcome.keyframe_refs.push(rel);
        }
        let mut lines = Vec::new();
        for r in trace {
            serde_json::to_writer(&mut lines, r).map_err(|e| StoreError::Encode {
                what: "trace".into(),
                message: e.to_string(),
            })?;
            lines.push(b'\n');
        }
        write_atomic(&dir.join("trace.jsonl"), &lines)?;
        write_atomic(&dir.join("outcome.json"), &to_json("outcome", &outcome)?)?;
        self.index.episodes.push(expected);
        self.commit_index()?;
        Ok(outcome)
    }

    pub fn record_controller(&mut self, version: u32, source: &str) -> Result<(), StoreError> {
        let path = self.root.join("controllers").join(format!("v{version:03}.ctl"));
        write_atomic(&path, source.as_bytes())?;
        if !self.index.controllers.contains(&version) {
            self.index.controllers.push(version);
            self.index.controllers.sort_unstable();
        }
        self.commit_index()
    }

    /// Stores a diagnosis under the next call number and returns that number.
    pub fn record_diagnosis(&mut self, record: &DiagnosisRecord) -> Result<u32, StoreError> {
        let n = self.diagnosis_count();
        let path = self.root.join("diagnoses").join(format!("d{n:03}.json"));
        write_atomic(&path, &to_json("diagnosis", record)?)?;
        self.index.diagnoses.push(n);
        self.commit_index()?;
        Ok(n)
    }

    /// Writes a JSON file relative to the run directory.
    pub fn write_json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> Result<PathBuf, StoreError> {
        let path = self.root.join(rel);
        write_atomic(&path, &to_json(rel, value)?)?;
        Ok(path)
    }

    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        Ok(path)
    }
}

/// Everything a run directory remembers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub outcomes: Vec<EpisodeOutcome>,
    pub diagnoses: Vec<(u32, DiagnosisRecord)>,
    pub controllers: Vec<(u32, String)>,
    /// Records that were indexed but could not be read.
    pub warnings: Vec<String>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, String> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| format!("{}: {e}", path.display())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(format!("{}: {e}", path.display())),
    }
}

/// Reads the indexed history of a run directory, skipping unreadable records with a warning.
pub fn load_history(root: &Path) -> Result<History, StoreError> {
    let index = read_index(root)?;
    let mut h = History::default();
    for &i in &index.episodes {
        let path = episode_dir(root, i).join("outcome.json");
        match read_json::<EpisodeOutcome>(&path) {
            Ok(Some(o)) => h.outcomes.push(o),
            Ok(None) => h.warnings.push(format!("episode {i}: {} is missing", path.display())),
            Err(e) => h.warnings.push(format!("episode {i}: {e}")),
        }
    }
    h.outcomes.sort_by_key(|o| o.episode_index);
    for &n in &index.diagnoses {
        let path = root.join("diagnoses").join(format!("d{n:03}.json"));
        match read_json::<DiagnosisRecord>(&path) {
            Ok(Some(d)) => h.diagnoses.push((n, d)),
            Ok(None) => {}
            Err(e) => h.warnings.push(format!("diagnosis {n}: {e}")),
        }
    }
    for &v in &index.controllers {
        let path = root.join("controllers").join(format!("v{v:03}.ctl"));
        match fs::read_to_string(&path) {
            Ok(src) => h.controllers.push((v, src)),
            Err(e) => h.warnings.push(format!("controller v{v}: {}: {e}", path.display())),
        }
    }
    Ok(h)
}

/// Reads the step trace of an indexed episode.
pub fn load_trace(root: &Path, episode: u32) -> Result<Vec<StepRecord>, String> {
    let path = episode_dir(root, episode).join("trace.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", path.display(), n + 1)))
        .collect()
}
