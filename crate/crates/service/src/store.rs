use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use serde::{Deserialize, Serialize};
use trapsift_core::catalog::{ingest_manifest, CameraTrapImage, Catalog, IngestOptions};
use trapsift_core::ensemble::{ImageFailure, ImageOutcome, Pipeline, PipelineConfig, RunRecord};
use trapsift_core::seed::sha256_hex;
use trapsift_core::{ClassTaxonomy, TaxonomyRegistry};

use crate::{storage, ServiceError};

/// Request body of `POST /runs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRun {
    pub manifest: PathBuf,
    /// Pipeline config file; relative backend paths resolve against its directory.
    pub config: PathBuf,
    #[serde(default)]
    pub no_pixels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

/// Immutable record of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub run_id: String,
    pub config: PipelineConfig,
    pub config_dir: PathBuf,
    pub manifest: PathBuf,
    pub catalog_root: PathBuf,
    pub images: Vec<CameraTrapImage>,
    pub record: RunRecord,
    pub outcomes: Vec<ImageOutcome>,
    pub failures: Vec<ImageFailure>,
}

/// One line of a run's decision log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    /// Position in the log, from 1.
    pub seq: u64,
    pub run_id: String,
    pub image_id: String,
    pub reviewer: String,
    pub decided_label: String,
    pub decided_at: String,
    /// `seq` of the decision this one replaced, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub manifest: PathBuf,
    pub record: RunRecord,
    pub n_outcomes: usize,
    pub n_decisions: usize,
    pub n_reviewed: usize,
    pub created: bool,
}

pub(crate) struct DecisionLog {
    pub path: PathBuf,
    pub records: Vec<DecisionRecord>,
    /// Image id → index into `records` of its active decision.
    pub active: BTreeMap<String, usize>,
}

/// A loaded run: snapshot, lookup tables and its decision log.
pub struct RunState {
    pub snapshot: RunSnapshot,
    pub taxonomy: ClassTaxonomy,
    pub(crate) outcome_index: HashMap<String, usize>,
    pub(crate) image_index: HashMap<String, usize>,
    pub(crate) log: Mutex<DecisionLog>,
    pipeline: OnceLock<Result<Pipeline, String>>,
}

impl RunState {
    fn new(snapshot: RunSnapshot, records: Vec<DecisionRecord>, log_path: PathBuf) -> Result<Self, ServiceError> {
        let mut registry = TaxonomyRegistry::builtin();
        for f in &snapshot.config.taxonomy_files {
            registry
                .load_file(&snapshot.config_dir.join(f))
                .map_err(|e| ServiceError::Storage(e.to_string()))?;
        }
        let taxonomy =
            registry.get(&snapshot.config.taxonomy).map_err(|e| ServiceError::Storage(e.to_string()))?.clone();
        let outcome_index = snapshot.outcomes.iter().enumerate().map(|(i, o)| (o.image_id.clone(), i)).collect();
        let image_index = snapshot.images.iter().enumerate().map(|(i, o)| (o.image_id.clone(), i)).collect();
        let active = crate::review::active_index(&records);
        Ok(Self {
            snapshot,
            taxonomy,
            outcome_index,
            image_index,
            log: Mutex::new(DecisionLog { path: log_path, records, active }),
            pipeline: OnceLock::new(),
        })
    }

    pub fn run_id(&self) -> &str {
        &self.snapshot.run_id
    }

    pub fn outcome(&self, image_id: &str) -> Option<&ImageOutcome> {
        self.outcome_index.get(image_id).map(|&i| &self.snapshot.outcomes[i])
    }

    pub fn image(&self, image_id: &str) -> Option<&CameraTrapImage> {
        self.image_index.get(image_id).map(|&i| &self.snapshot.images[i])
    }

    /// Copy of the decision log in append order.
    pub fn decisions(&self) -> Vec<DecisionRecord> {
        self.log.lock().expect("log lock").records.clone()
    }

    /// Pipeline rebuilt from the stored config, for artifact rendering.
    pub fn pipeline(&self) -> Result<&Pipeline, ServiceError> {
        self.pipeline
            .get_or_init(|| {
                let mut config = self.snapshot.config.clone();
                config.base_dir = self.snapshot.config_dir.clone();
                Pipeline::build(&config, &TaxonomyRegistry::builtin()).map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| ServiceError::Pipeline(e.clone()))
    }

    pub fn summary(&self, created: bool) -> RunSummary {
        let log = self.log.lock().expect("log lock");
        RunSummary {
            run_id: self.snapshot.run_id.clone(),
            manifest: self.snapshot.manifest.clone(),
            record: self.snapshot.record.clone(),
            n_outcomes: self.snapshot.outcomes.len(),
            n_decisions: log.records.len(),
            n_reviewed: log.active.len(),
            created,
        }
    }

    /// Appends `record` to the log file and memory. Callers hold the lock.
    pub(crate) fn append(log: &mut DecisionLog, record: DecisionRecord) -> Result<(), ServiceError> {
        let line = serde_json::to_string(&record).expect("decision serializes");
        let mut f = OpenOptions::new().create(true).append(true).open(&log.path).map_err(|e| storage(&log.path, e))?;
        writeln!(f, "{line}").and_then(|_| f.sync_data()).map_err(|e| storage(&log.path, e))?;
        log.active.insert(record.image_id.clone(), log.records.len());
        log.records.push(record);
        Ok(())
    }
}

/// Directory-backed run store: `<root>/runs/<run_id>/{snapshot.json,decisions.ndjson}`.
pub struct RunStore {
    root: PathBuf,
    runs: RwLock<BTreeMap<String, Arc<RunState>>>,
}

fn read_log(path: &Path) -> Result<Vec<DecisionRecord>, ServiceError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| storage(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| storage(path, format!("line {}: {e}", i + 1))))
        .collect()
}

impl RunStore {
    /// Opens (creating if needed) a store and loads every run in it.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        let runs_dir = root.join("runs");
        fs::create_dir_all(&runs_dir).map_err(|e| storage(&runs_dir, e))?;
        let mut runs = BTreeMap::new();
        for entry in fs::read_dir(&runs_dir).map_err(|e| storage(&runs_dir, e))? {
            let dir = entry.map_err(|e| storage(&runs_dir, e))?.path();
            let snap_path = dir.join("snapshot.json");
            if !snap_path.is_file() {
                continue;
            }
            let text = fs::read_to_string(&snap_path).map_err(|e| storage(&snap_path, e))?;
            let snapshot: RunSnapshot = serde_json::from_str(&text).map_err(|e| storage(&snap_path, e))?;
            let log_path = dir.join("decisions.ndjson");
            let state = RunState::new(snapshot, read_log(&log_path)?, log_path)?;
            runs.insert(state.run_id().to_owned(), Arc::new(state));
        }
        Ok(Self { root, runs: RwLock::new(runs) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_ids(&self) -> Vec<String> {
        self.runs.read().expect("runs lock").keys().cloned().collect()
    }

    pub fn get(&self, run_id: &str) -> Result<Arc<RunState>, ServiceError> {
        self.runs.read().expect("runs lock").get(run_id).cloned().ok_or_else(|| ServiceError::UnknownRun(run_id.to_owned()))
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    /// Runs the pipeline and stores the result. A request whose config and
    /// manifest match an existing run returns that run unchanged.
    pub fn create_run(&self, req: &CreateRun) -> Result<RunSummary, ServiceError> {
        let mut config = PipelineConfig::load(&req.config).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        if let Some(w) = req.workers {
            config.workers = w;
        }
        config.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let catalog = ingest_manifest(&req.manifest, IngestOptions { no_pixels: req.no_pixels })
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let run_id = run_id_for(&config, &catalog);
        if let Ok(existing) = self.get(&run_id) {
            return Ok(existing.summary(false));
        }
        let output = Pipeline::build(&config, &TaxonomyRegistry::builtin())
            .and_then(|p| p.run(&catalog))
            .map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        let snapshot = RunSnapshot {
            run_id: run_id.clone(),
            config_dir: config.base_dir.clone(),
            config,
            manifest: req.manifest.clone(),
            catalog_root: catalog.root().to_path_buf(),
            images: catalog.images().to_vec(),
            record: output.record,
            outcomes: output.outcomes,
            failures: output.failures,
        };
        self.insert_snapshot(snapshot).map(|s| s.summary(true))
    }

    /// Persists a ready-made snapshot (used by `create_run` and tests).
    pub fn insert_snapshot(&self, snapshot: RunSnapshot) -> Result<Arc<RunState>, ServiceError> {
        let mut runs = self.runs.write().expect("runs lock");
        if let Some(s) = runs.get(&snapshot.run_id) {
            return Ok(s.clone());
        }
        let dir = self.run_dir(&snapshot.run_id);
        fs::create_dir_all(&dir).map_err(|e| storage(&dir, e))?;
        let path = dir.join("snapshot.json");
        let tmp = dir.join("snapshot.json.tmp");
        let text = serde_json::to_string_pretty(&snapshot).expect("snapshot serializes");
        fs::write(&tmp, text).and_then(|_| fs::rename(&tmp, &path)).map_err(|e| storage(&path, e))?;
        let log_path = dir.join("decisions.ndjson");
        let state = Arc::new(RunState::new(snapshot, read_log(&log_path)?, log_path)?);
        runs.insert(state.run_id().to_owned(), state.clone());
        Ok(state)
    }
}

/// Same config semantics over the same manifest content → same id.
pub fn run_id_for(config: &PipelineConfig, catalog: &Catalog) -> String {
    let manifest_hash = sha256_hex(catalog.to_ndjson().as_bytes());
    sha256_hex(format!("{}:{manifest_hash}", config.config_hash()).as_bytes())[..16].to_owned()
}
