//! Experiment configuration, content-addressed artifact naming, run
//! manifests, and JSONL metric records.
//!
//! The config is one flat TOML file with [synth]/[model]/[train_*]/[stream]/
//! [bench]/[pipeline] sections. Artifacts are prefixed with a hash of the
//! config text so two different configs can never collide in one output
//! directory. Per-phase seeds derive from the global seed and the phase
//! name, so any phase is reproducible in isolation.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};
use crate::generator::TrainSchedule;
use crate::memory::MemoryTrainConfig;
use crate::model::{AttentionMode, ModelConfig};
use crate::rng::{content_hash_hex, derive_seed};
use crate::streaming::CacheMode;
use crate::synthworld::{DatasetConfig, WorldConfig};

// ---------------------------------------------------------------------------
// Metric records
// ---------------------------------------------------------------------------

/// One JSONL metrics line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss_name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_draw: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f32>,
}

pub trait MetricSink {
    fn record(&mut self, rec: &MetricRecord);
}

/// Discards everything.
pub struct NullSink;

impl MetricSink for NullSink {
    fn record(&mut self, _rec: &MetricRecord) {}
}

/// Buffers records in memory.
#[derive(Default)]
pub struct VecSink {
    pub records: Vec<MetricRecord>,
}

impl MetricSink for VecSink {
    fn record(&mut self, rec: &MetricRecord) {
        self.records.push(rec.clone());
    }
}

/// Streams records to a JSONL file (and keeps them in memory).
pub struct JsonlSink {
    file: std::io::BufWriter<std::fs::File>,
    pub records: Vec<MetricRecord>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlSink {
            file: std::io::BufWriter::new(std::fs::File::create(path)?),
            records: Vec::new(),
        })
    }
}

impl MetricSink for JsonlSink {
    fn record(&mut self, rec: &MetricRecord) {
        let line = serde_json::to_string(rec).expect("metric record serializes");
        let _ = writeln!(self.file, "{line}");
        self.records.push(rec.clone());
    }
}

impl Drop for JsonlSink {
    fn drop(&mut self) {
        let _ = self.file.flush();
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| MagError::Checkpoint(format!("bad metrics line: {e}")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Config sections
// ---------------------------------------------------------------------------

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub n_train: usize,
    pub n_test: usize,
    pub clip_len: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub world_w: usize,
    pub scene_families: u16,
    pub max_step: usize,
    pub p_pan: f64,
    pub p_leave_return: f64,
    pub p_static: f64,
    /// Also write PNG/GIF previews of the first few clips.
    #[serde(default = "default_true")]
    pub previews: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_train: 64,
            n_test: 16,
            clip_len: 12,
            frame_h: 24,
            frame_w: 24,
            world_w: 256,
            scene_families: 8,
            max_step: 4,
            p_pan: 0.35,
            p_leave_return: 0.5,
            p_static: 0.15,
            previews: true,
        }
    }
}

impl SynthSection {
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            frame_h: self.frame_h,
            frame_w: self.frame_w,
            world_w: self.world_w,
            scene_families: self.scene_families,
            max_step: self.max_step,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            world: self.world_config(),
            clip_len: self.clip_len,
            p_pan: self.p_pan,
            p_leave_return: self.p_leave_return,
            p_static: self.p_static,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub block_frames: usize,
    pub time_embed_dim: usize,
    pub max_position: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk_default();
        ModelSection {
            layers: d.layers,
            d_model: d.d_model,
            heads: d.heads,
            patch_size: d.patch_size,
            block_frames: d.block_frames,
            time_embed_dim: d.time_embed_dim,
            max_position: d.max_position,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, synth: &SynthSection, mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            patch_size: self.patch_size,
            block_frames: self.block_frames,
            frame_h: synth.frame_h,
            frame_w: synth.frame_w,
            channels: 1,
            attention_mode: mode,
            scene_vocab: synth.scene_families as usize,
            motion_vocab: 4,
            time_embed_dim: self.time_embed_dim,
            max_position: self.max_position,
            rope_base: 10000.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSection {
    pub steps: usize,
    pub lr: f32,
    pub log_every: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            steps: 1200,
            lr: 1e-4,
            log_every: 25,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MemorySection {
    pub steps: usize,
    pub lr: f32,
    pub max_blocks_per_sample: usize,
    pub start_offset_max: u32,
    pub log_every: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        let d = MemoryTrainConfig::default();
        MemorySection {
            steps: d.steps,
            lr: d.lr,
            max_blocks_per_sample: d.max_blocks_per_sample,
            start_offset_max: d.start_offset_max,
            log_every: d.log_every,
        }
    }
}

impl MemorySection {
    pub fn train_config(&self) -> MemoryTrainConfig {
        MemoryTrainConfig {
            steps: self.steps,
            lr: self.lr,
            max_blocks_per_sample: self.max_blocks_per_sample,
            start_offset_max: self.start_offset_max,
            log_every: self.log_every,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSection {
    pub cycles: usize,
    pub k: usize,
    pub lambda: f64,
    pub ratio: usize,
    pub gen_lr: f32,
    pub student_lr: f32,
    pub sample_steps: usize,
    pub clip_frames: usize,
    pub log_every: usize,
    /// Save an intermediate generator checkpoint every N cycles (0 = off).
    pub checkpoint_every: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            cycles: 100,
            k: 7,
            lambda: 0.6,
            ratio: 5,
            gen_lr: 2e-5,
            student_lr: 4e-6,
            sample_steps: 4,
            clip_frames: 12,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl GeneratorSection {
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            k: self.k,
            lambda: self.lambda,
            student_per_generator: self.ratio,
            cycles: self.cycles,
            clip_frames: self.clip_frames,
            gen_lr: self.gen_lr,
            student_lr: self.student_lr,
            sample_steps: self.sample_steps,
            log_every: self.log_every,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSection {
    pub blocks: usize,
    pub mode: String,
    pub sample_steps: usize,
    pub scene_id: u16,
    pub motion_id: u16,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection {
            blocks: 10,
            mode: "mag".into(),
            sample_steps: 4,
            scene_id: 0,
            motion_id: 0,
        }
    }
}

impl StreamSection {
    pub fn cache_mode(&self) -> Result<CacheMode> {
        CacheMode::parse(&self.mode)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub n_cases: usize,
    /// Frames per leg (memorize leg and return leg are equal length).
    pub leg_frames: usize,
    pub sample_steps: usize,
    pub min_offset: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            n_cases: 176,
            leg_frames: 12,
            sample_steps: 4,
            min_offset: 24,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    pub phases: Vec<String>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            phases: vec![
                "synth".into(),
                "teacher".into(),
                "memory".into(),
                "generator".into(),
                "bench".into(),
            ],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train_teacher: TeacherSection,
    pub train_memory: MemorySection,
    pub train_generator: GeneratorSection,
    pub stream: StreamSection,
    pub bench: BenchSection,
    pub pipeline: PipelineSection,
}

pub const KNOWN_PHASES: &[&str] = &["synth", "teacher", "memory", "generator", "bench"];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| MagError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MagError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::from_toml_str(&text)?;
        Ok((cfg, content_hash_hex(text.as_bytes())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.dataset_config().validate()?;
        self.model
            .model_config(&self.synth, AttentionMode::BlockCausal)
            .validate()?;
        if !self.synth.clip_len.is_multiple_of(self.model.block_frames) {
            return Err(MagError::Config(format!(
                "clip_len {} not divisible by block_frames {}",
                self.synth.clip_len, self.model.block_frames
            )));
        }
        for phase in &self.pipeline.phases {
            if !KNOWN_PHASES.contains(&phase.as_str()) {
                return Err(MagError::Config(format!(
                    "unknown pipeline phase '{phase}' (known: {KNOWN_PHASES:?})"
                )));
            }
        }
        self.stream.cache_mode()?;
        if !self.bench.leg_frames.is_multiple_of(self.model.block_frames) {
            return Err(MagError::Config(format!(
                "bench leg_frames {} not divisible by block_frames {}",
                self.bench.leg_frames, self.model.block_frames
            )));
        }
        Ok(())
    }

    pub fn phase_seed(&self, global_seed: u64, phase: &str) -> u64 {
        derive_seed(global_seed, phase)
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub global_seed: u64,
    pub phases_run: Vec<String>,
    pub artifacts: std::collections::BTreeMap<String, String>,
}

impl Manifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load(out_dir: &Path) -> Result<Manifest> {
        let p = Self::path(out_dir);
        let text = std::fs::read_to_string(&p)
            .map_err(|e| MagError::Dependency(format!("no manifest at {}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| MagError::Checkpoint(format!("bad manifest: {e}")))
    }

    pub fn load_or_new(out_dir: &Path, config_hash: &str, seed: u64) -> Manifest {
        match Self::load(out_dir) {
            Ok(m) if m.config_hash == config_hash && m.global_seed == seed => m,
            _ => Manifest {
                config_hash: config_hash.to_string(),
                global_seed: seed,
                ..Manifest::default()
            },
        }
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(Self::path(out_dir), text)?;
        Ok(())
    }

    pub fn record_phase(&mut self, phase: &str) {
        if !self.phases_run.iter().any(|p| p == phase) {
            self.phases_run.push(phase.to_string());
        }
    }

    pub fn artifact(&self, key: &str) -> Result<&str> {
        self.artifacts
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| MagError::Dependency(format!("missing prerequisite artifact '{key}'")))
    }
}

/// `<hash12>-<name>` inside the output directory.
pub fn artifact_path(out_dir: &Path, config_hash: &str, name: &str) -> PathBuf {
    out_dir.join(format!("{}-{name}", &config_hash[..12.min(config_hash.len())]))
}
