//! Versioned JSON file formats: scenes, labels, action labels, rollout
//! logs, scenario manifests and metric reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use metaction_core::geometry::{GeometryError, MapPolyline, RoadMap};
use metaction_core::kinematics::ActionGrid;
use metaction_core::labeler::MetaAction;
use metaction_core::metrics::{ComplianceVerdict, MetricReport};
use metaction_core::scene::{Agent, Scene, SceneError};
use metaction_core::sim::{OverrideEvent, StepRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{context}: line {line}, column {column}: {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{context}: unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { context: String, found: u32 },
    #[error("{context}: unsupported units {found:?}")]
    Units { context: String, found: Units },
    #[error("{context}: {source}")]
    Scene { context: String, source: SceneError },
    #[error("{context}: map: {source}")]
    Map { context: String, source: GeometryError },
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn parse_error(context: &str, e: serde_json::Error) -> FormatError {
    FormatError::Parse {
        context: context.to_string(),
        line: e.line(),
        column: e.column(),
        message: strip_position(&e.to_string()),
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Parses `text`, naming `context` (usually the path) in errors.
pub fn from_json<T: DeserializeOwned>(text: &str, context: &str) -> Result<T, FormatError> {
    serde_json::from_str(text).map_err(|e| parse_error(context, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, FormatError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| FormatError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_version(found: u32, context: &str) -> Result<(), FormatError> {
    if found != FORMAT_VERSION {
        return Err(FormatError::Version {
            context: context.to_string(),
            found,
        });
    }
    Ok(())
}

trait Versioned {
    fn version(&self) -> u32;
}

fn load<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T, FormatError> {
    let context = path.display().to_string();
    let v: T = from_json(&read_text(path)?, &context)?;
    check_version(v.version(), &context)?;
    Ok(v)
}

fn save<T: Serialize>(value: &T, path: &Path) -> Result<(), FormatError> {
    write_text(path, &to_json(value)?)
}

/// Unit labels written into every scene file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub length: String,
    pub angle: String,
    pub speed: String,
    pub time: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            length: "m".into(),
            angle: "rad".into(),
            speed: "m/s".into(),
            time: "s".into(),
        }
    }
}

fn default_rate() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    #[serde(default)]
    pub units: Units,
    pub id: String,
    #[serde(default = "default_rate")]
    pub frame_rate_hz: f64,
    pub agents: Vec<Agent>,
    pub map: Vec<MapPolyline>,
}

impl Versioned for SceneFile {
    fn version(&self) -> u32 {
        self.version
    }
}

impl SceneFile {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            version: FORMAT_VERSION,
            units: Units::default(),
            id: scene.id.clone(),
            frame_rate_hz: scene.frame_rate_hz,
            agents: scene.agents.clone(),
            map: scene.map.polylines().to_vec(),
        }
    }

    pub fn into_scene(self, context: &str) -> Result<Scene, FormatError> {
        check_version(self.version, context)?;
        if self.units != Units::default() {
            return Err(FormatError::Units {
                context: context.to_string(),
                found: self.units,
            });
        }
        let map = RoadMap::new(self.map).map_err(|source| FormatError::Map {
            context: context.to_string(),
            source,
        })?;
        Scene::new(self.id, self.frame_rate_hz, self.agents, map).map_err(|source| FormatError::Scene {
            context: context.to_string(),
            source,
        })
    }
}

pub fn scene_from_json(text: &str, context: &str) -> Result<Scene, FormatError> {
    from_json::<SceneFile>(text, context)?.into_scene(context)
}

pub fn scene_to_json(scene: &Scene) -> Result<String, FormatError> {
    to_json(&SceneFile::from_scene(scene))
}

pub fn load_scene(path: &Path) -> Result<Scene, FormatError> {
    scene_from_json(&read_text(path)?, &path.display().to_string())
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), FormatError> {
    write_text(path, &scene_to_json(scene)?)
}

/// Per-agent meta-action codes, one per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFile {
    pub version: u32,
    pub scene_id: String,
    pub labels: BTreeMap<u32, Vec<MetaAction>>,
}

impl Versioned for LabelFile {
    fn version(&self) -> u32 {
        self.version
    }
}

pub fn load_labels(path: &Path) -> Result<LabelFile, FormatError> {
    load(path)
}

pub fn save_labels(labels: &LabelFile, path: &Path) -> Result<(), FormatError> {
    save(labels, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentActions {
    /// Bin applied at each frame; one fewer than the track length.
    pub bins: Vec<usize>,
    /// m
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionsFile {
    pub version: u32,
    pub scene_id: String,
    pub grid: ActionGrid,
    pub agents: BTreeMap<u32, AgentActions>,
}

impl Versioned for ActionsFile {
    fn version(&self) -> u32 {
        self.version
    }
}

pub fn load_actions(path: &Path) -> Result<ActionsFile, FormatError> {
    load(path)
}

pub fn save_actions(actions: &ActionsFile, path: &Path) -> Result<(), FormatError> {
    save(actions, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSampleLog {
    pub seed: u64,
    pub overrides: Vec<OverrideEvent>,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutFile {
    pub version: u32,
    pub scene_id: String,
    pub warmup: usize,
    pub horizon: usize,
    pub temperature: f64,
    pub samples: Vec<RolloutSampleLog>,
}

impl Versioned for RolloutFile {
    fn version(&self) -> u32 {
        self.version
    }
}

pub fn load_rollout(path: &Path) -> Result<RolloutFile, FormatError> {
    load(path)
}

pub fn save_rollout(rollout: &RolloutFile, path: &Path) -> Result<(), FormatError> {
    save(rollout, path)
}

/// One evaluation scenario; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    pub id: String,
    pub scene: PathBuf,
    pub rollout: PathBuf,
    pub agent: u32,
    pub target: MetaAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub version: u32,
    pub scenarios: Vec<ScenarioEntry>,
}

impl Versioned for ManifestFile {
    fn version(&self) -> u32 {
        self.version
    }
}

pub fn load_manifest(path: &Path) -> Result<ManifestFile, FormatError> {
    load(path)
}

pub fn save_manifest(manifest: &ManifestFile, path: &Path) -> Result<(), FormatError> {
    save(manifest, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub version: u32,
    pub min_run: usize,
    pub report: MetricReport,
    pub scenarios: Vec<ComplianceVerdict>,
}

impl Versioned for ReportFile {
    fn version(&self) -> u32 {
        self.version
    }
}

pub fn load_report(path: &Path) -> Result<ReportFile, FormatError> {
    load(path)
}

pub fn save_report(report: &ReportFile, path: &Path) -> Result<(), FormatError> {
    save(report, path)
}
