use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{degrade_frames, feature_frame_symbols, make_clean_sample, DegradeConfig, SymbolBank, SymbolScript};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::io;
use crate::rng::{derive_seed, rng_for};
use crate::units::UnitSequence;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub alphabet: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// Mel frames per symbol.
    pub duration: usize,
    /// Template for every entry; the seed is replaced per entry.
    pub degrade: DegradeConfig,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn new(n_train: usize, n_test: usize, severity: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            n_train,
            n_test,
            alphabet: super::DEFAULT_ALPHABET,
            min_symbols: 5,
            max_symbols: 8,
            duration: super::DEFAULT_DURATION,
            degrade: DegradeConfig::from_severity(severity, 0)?,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::invalid("corpus needs at least one train and one test entry"));
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return Err(Error::invalid("script length bounds must satisfy 1 <= min <= max"));
        }
        if self.duration == 0 || self.alphabet < 2 {
            return Err(Error::invalid("duration must be positive and the alphabet at least 2"));
        }
        self.degrade.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One paired sample. Paths are relative to the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    pub clean_mel_path: String,
    pub clean_feature_path: String,
    pub degraded_feature_path: String,
    pub degraded_mel_path: String,
    /// Ground-truth symbol of every clean feature frame (unit file format).
    pub alignment_path: String,
    pub script: SymbolScript,
    pub severity: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub dir: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            entries.push(serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.clone(),
                reason: format!("line {}: {e}", n + 1),
            })?);
        }
        let manifest = Self {
            dir: dir.to_path_buf(),
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(&e.id) {
                return Err(Error::invalid(format!("duplicate corpus id {}", e.id)));
            }
            for p in [&e.clean_mel_path, &e.clean_feature_path, &e.degraded_feature_path, &e.degraded_mel_path] {
                if !self.dir.join(p).exists() {
                    return Err(Error::invalid(format!("corpus file {p} is missing")));
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Draws `n_train` scripts, then `n_test` scripts that appear in neither
/// split before.
fn draw_scripts(cfg: &CorpusConfig) -> Result<Vec<(SymbolScript, Split)>> {
    let mut rng = rng_for(cfg.seed, 0);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cfg.n_train + cfg.n_test);
    let budget = 100 * (cfg.n_train + cfg.n_test) + 1000;
    let mut attempts = 0;
    for (count, split) in [(cfg.n_train, Split::Train), (cfg.n_test, Split::Test)] {
        let mut made = 0;
        while made < count {
            attempts += 1;
            if attempts > budget {
                return Err(Error::invalid("cannot draw enough distinct scripts; widen the alphabet or lengths"));
            }
            let len = rand::Rng::random_range(&mut rng, cfg.min_symbols..=cfg.max_symbols);
            let script = SymbolScript::random(&mut rng, len, cfg.alphabet, cfg.duration)?;
            if seen.insert(script.symbols.clone()) {
                out.push((script, split));
                made += 1;
            }
        }
    }
    Ok(out)
}

/// Renders the corpus into `dir` (clean and degraded mel and features, the
/// ground-truth alignment) and writes `manifest.jsonl`. Entries are rendered
/// on `workers` threads; output does not depend on the worker count.
pub fn build_corpus(dir: &Path, cfg: &CorpusConfig, workers: usize) -> Result<CorpusManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bank = SymbolBank::new(cfg.alphabet)?;
    let scripts = draw_scripts(cfg)?;
    let workers = workers.clamp(1, scripts.len());

    let render = |idx: usize| -> Result<CorpusEntry> {
        let (script, split) = &scripts[idx];
        let id = format!("utt{idx:05}");
        let (clean, clean_feats) = make_clean_sample(&bank, script, derive_seed(cfg.seed, 1 + idx as u64))?;
        let dcfg = cfg.degrade.with_seed(derive_seed(cfg.seed ^ 0xDE6A_ADE0, idx as u64));
        let degraded = MelSpectrogram::new(degrade_frames(clean.frames().view(), &dcfg)?)?;
        let degraded_feats = bank.features_of(degraded.frames().view())?;
        let entry = CorpusEntry {
            clean_mel_path: format!("{id}.clean.mel"),
            clean_feature_path: format!("{id}.clean.fea"),
            degraded_feature_path: format!("{id}.degraded.fea"),
            degraded_mel_path: format!("{id}.degraded.mel"),
            alignment_path: format!("{id}.align.units"),
            script: script.clone(),
            severity: cfg.degrade.severity,
            split: *split,
            id,
        };
        io::write_mel(&dir.join(&entry.clean_mel_path), &clean)?;
        io::write_features(&dir.join(&entry.clean_feature_path), &clean_feats)?;
        io::write_mel(&dir.join(&entry.degraded_mel_path), &degraded)?;
        io::write_features(&dir.join(&entry.degraded_feature_path), &degraded_feats)?;
        let align = UnitSequence::raw(feature_frame_symbols(script));
        io::write_units(&dir.join(&entry.alignment_path), &align, cfg.alphabet)?;
        Ok(entry)
    };

    let mut slots: Vec<Option<Result<CorpusEntry>>> = (0..scripts.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let render = &render;
                let n = scripts.len();
                s.spawn(move || (w..n).step_by(workers).map(|i| (i, render(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("corpus worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let entries = slots.into_iter().map(|r| r.expect("every entry rendered")).collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest {
        dir: dir.to_path_buf(),
        entries,
    };
    io::write_atomic(&dir.join(MANIFEST_FILE), manifest.to_jsonl().as_bytes())?;
    io::write_atomic(
        &dir.join("corpus.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes").as_bytes(),
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig::new(10, 4, 0.5, seed).unwrap()
    }

    #[test]
    fn writes_entries_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_corpus(dir.path(), &small(1), 2).unwrap();
        assert_eq!(m.split(Split::Train).count(), 10);
        assert_eq!(m.split(Split::Test).count(), 4);
        let loaded = CorpusManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let e = &m.entries[0];
        let mel = io::read_mel(&m.resolve(&e.clean_mel_path)).unwrap();
        assert_eq!(mel.num_frames(), e.script.num_frames());
        let deg = io::read_mel(&m.resolve(&e.degraded_mel_path)).unwrap();
        assert!(deg.num_frames() >= mel.num_frames());
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        build_corpus(a.path(), &small(3), 1).unwrap();
        build_corpus(b.path(), &small(3), 3).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.len() > 10);
        for n in names {
            assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_corpus(dir.path(), &CorpusConfig::new(40, 20, 0.3, 8).unwrap(), 1).unwrap();
        let train: HashSet<_> = m.split(Split::Train).map(|e| e.script.symbols.clone()).collect();
        assert!(m.split(Split::Test).all(|e| !train.contains(&e.script.symbols)));
    }

    #[test]
    fn errors() {
        assert!(CorpusConfig::new(0, 1, 0.5, 0).unwrap().validate().is_err());
        let file = tempfile::NamedTempFile::new().unwrap();
        let r = build_corpus(&file.path().join("sub"), &small(0), 1);
        assert!(matches!(r, Err(Error::Io { .. })));
        assert!(matches!(CorpusManifest::load(Path::new("/nonexistent/corpus")), Err(Error::Io { .. })));
    }
}
