//! Pipeline phase implementations shared by the subcommands.

use std::path::Path;

use mag_core::error::{MagError, Result};
use mag_core::flow::FmTask;
use mag_core::generator::{init_generator_from_memory, train_generator_with_checkpoints};
use mag_core::magbench::{
    build_bench, compare, evaluate_model, BenchBuildConfig, BenchCase, BenchCaseMeta, Continuer,
    EvalMode, EvalReport, FrameMetric,
};
use mag_core::memory::{eval_reconstruction, train_memory};
use mag_core::model::mask::AttentionMask;
use mag_core::model::{patchify, token_positions, AttentionMode, Model, ModelConfig};
use mag_core::nn::{Adam, AdamConfig, ParamSet};
use mag_core::rng::Rng;
use mag_core::runcfg::{artifact_path, ExperimentConfig, JsonlSink, Manifest, MetricRecord, MetricSink};
use mag_core::streaming::{perf_summary, stream_generate, StreamSession};
use mag_core::synthworld::io::{export_gif, export_png_frames, write_clip};
use mag_core::synthworld::{make_dataset, SceneCondition, VideoClip};

pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub out_dir: std::path::PathBuf,
    pub manifest: Manifest,
}

impl RunContext {
    pub fn new(config_path: &Path, seed: u64, out_dir: &Path) -> Result<Self> {
        let (cfg, config_hash) = ExperimentConfig::load(config_path)?;
        std::fs::create_dir_all(out_dir)?;
        let manifest = Manifest::load_or_new(out_dir, &config_hash, seed);
        Ok(RunContext {
            cfg,
            config_hash,
            seed,
            out_dir: out_dir.to_path_buf(),
            manifest,
        })
    }

    pub fn artifact(&self, name: &str) -> std::path::PathBuf {
        artifact_path(&self.out_dir, &self.config_hash, name)
    }

    pub fn save_manifest(&mut self, phase: &str, artifacts: &[(&str, &Path)]) -> Result<()> {
        self.manifest.record_phase(phase);
        for (key, path) in artifacts {
            self.manifest
                .artifacts
                .insert(key.to_string(), path.display().to_string());
        }
        self.manifest.save(&self.out_dir)
    }

    fn model_cfg(&self, mode: AttentionMode) -> ModelConfig {
        self.cfg.model.model_config(&self.cfg.synth, mode)
    }

    fn train_clips(&self) -> Result<Vec<VideoClip>> {
        let seed = self.cfg.phase_seed(self.seed, "synth");
        make_dataset(seed, self.cfg.synth.n_train, &self.cfg.synth.dataset_config())
    }

    fn test_clips(&self) -> Result<Vec<VideoClip>> {
        let seed = mag_core::rng::derive_seed(self.cfg.phase_seed(self.seed, "synth"), "test");
        make_dataset(seed, self.cfg.synth.n_test, &self.cfg.synth.dataset_config())
    }

    fn load_model(&self, name: &str, key: &str, mode: AttentionMode) -> Result<Model> {
        let path = match self.manifest.artifacts.get(key) {
            Some(p) => std::path::PathBuf::from(p),
            None => self.artifact(name),
        };
        if !path.exists() {
            return Err(MagError::Dependency(format!(
                "missing prerequisite checkpoint {}",
                path.display()
            )));
        }
        let params = ParamSet::load(&path)?;
        let probe = Model::new(self.model_cfg(mode), 0)?;
        if !probe.params.same_layout(&params) {
            return Err(MagError::Checkpoint(format!(
                "checkpoint {} does not match the configured model",
                path.display()
            )));
        }
        Ok(Model {
            cfg: probe.cfg,
            params,
        })
    }

    // -----------------------------------------------------------------------

    pub fn phase_synth(&mut self) -> Result<()> {
        let data_dir = self.artifact("data");
        std::fs::create_dir_all(data_dir.join("train"))?;
        std::fs::create_dir_all(data_dir.join("test"))?;
        let train = self.train_clips()?;
        let test = self.test_clips()?;
        for (i, clip) in train.iter().enumerate() {
            write_clip(&data_dir.join(format!("train/clip_{i:05}.magv")), clip)?;
        }
        for (i, clip) in test.iter().enumerate() {
            write_clip(&data_dir.join(format!("test/clip_{i:05}.magv")), clip)?;
        }
        if self.cfg.synth.previews {
            for (i, clip) in train.iter().take(3).enumerate() {
                export_png_frames(&data_dir.join(format!("preview_{i}")), clip)?;
                export_gif(&data_dir.join(format!("preview_{i}.gif")), clip)?;
            }
        }
        println!(
            "synth: wrote {} train + {} test clips to {}",
            train.len(),
            test.len(),
            data_dir.display()
        );
        self.save_manifest("synth", &[("dataset", &data_dir)])
    }

    pub fn phase_teacher(&mut self) -> Result<()> {
        let clips = self.train_clips()?;
        let seed = self.cfg.phase_seed(self.seed, "teacher");
        let mut teacher = Model::new(self.model_cfg(AttentionMode::Bidirectional), seed)?;
        let metrics_path = self.artifact("metrics-teacher.jsonl");
        let mut sink = JsonlSink::create(&metrics_path)?;
        let mut rng = Rng::new(seed);
        let mut opt = Adam::new(&teacher.params, AdamConfig::with_lr(self.cfg.train_teacher.lr));
        let f = teacher.cfg.frame_tokens();
        for step in 0..self.cfg.train_teacher.steps {
            let clip = &clips[rng.next_below(clips.len())];
            let tokens = patchify(&clip.frames, clip.t, &teacher.cfg);
            let mask = AttentionMask::bidirectional(tokens.rows(), tokens.rows());
            let task = FmTask {
                data_tokens: &tokens,
                cond: clip.condition,
                cache: None,
                positions: token_positions(0, 0, clip.t, f),
                mask: &mask,
            };
            let (loss, grads) = mag_core::flow::fm_loss(&teacher, &task, &mut rng)?;
            opt.step(&mut teacher.params, &grads);
            if step % self.cfg.train_teacher.log_every == 0 {
                sink.record(&MetricRecord {
                    step: step as u64,
                    loss_name: "teacher_fm".into(),
                    value: loss as f64,
                    lambda_draw: None,
                    i: None,
                    t: None,
                });
            }
        }
        let ckpt = self.artifact("teacher.ckpt");
        teacher.params.save(&ckpt)?;
        println!("teacher: {} steps -> {}", self.cfg.train_teacher.steps, ckpt.display());
        self.save_manifest(
            "teacher",
            &[("teacher_ckpt", &ckpt), ("teacher_metrics", &metrics_path)],
        )
    }

    pub fn phase_memory(&mut self, b_override: Option<usize>, steps_override: Option<usize>) -> Result<()> {
        let clips = self.train_clips()?;
        let seed = self.cfg.phase_seed(self.seed, "memory");
        let mut model_cfg = self.model_cfg(AttentionMode::BlockCausal);
        if let Some(b) = b_override {
            model_cfg.block_frames = b;
        }
        let b = model_cfg.block_frames;
        let mut memory = Model::new(model_cfg, seed)?;
        let mut train_cfg = self.cfg.train_memory.train_config();
        if let Some(s) = steps_override {
            train_cfg.steps = s;
        }
        let metrics_path = self.artifact(&format!("metrics-memory-b{b}.jsonl"));
        let mut sink = JsonlSink::create(&metrics_path)?;
        train_memory(&mut memory, &clips, &train_cfg, seed, &mut sink)?;
        let ckpt = self.artifact(&format!("memory-b{b}.ckpt"));
        memory.params.save(&ckpt)?;
        println!("memory: b={b}, {} steps -> {}", train_cfg.steps, ckpt.display());
        let mut artifacts: Vec<(&str, &Path)> = vec![("memory_metrics", &metrics_path)];
        // The configured block size is the pipeline's memory model.
        if b == self.cfg.model.block_frames {
            artifacts.push(("memory_ckpt", &ckpt));
        }
        self.save_manifest("memory", &artifacts)?;
        if b != self.cfg.model.block_frames {
            self.manifest
                .artifacts
                .insert(format!("memory_ckpt_b{b}"), ckpt.display().to_string());
            self.manifest.save(&self.out_dir)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn phase_generator(
        &mut self,
        k: Option<usize>,
        lambda: Option<f64>,
        ratio: Option<usize>,
        steps: Option<usize>,
    ) -> Result<()> {
        let teacher = self.load_model("teacher.ckpt", "teacher_ckpt", AttentionMode::Bidirectional)?;
        let memory = self.load_model(
            &format!("memory-b{}.ckpt", self.cfg.model.block_frames),
            "memory_ckpt",
            AttentionMode::BlockCausal,
        )?;
        let mut schedule = self.cfg.train_generator.schedule();
        if let Some(k) = k {
            schedule.k = k;
        }
        if let Some(l) = lambda {
            schedule.lambda = l;
        }
        if let Some(r) = ratio {
            schedule.student_per_generator = r;
        }
        if let Some(s) = steps {
            schedule.cycles = s;
        }
        let seed = self.cfg.phase_seed(self.seed, "generator");
        let mut generator = init_generator_from_memory(&memory, self.model_cfg(AttentionMode::BlockCausal))?;
        let mut student = Model::with_params_from(self.model_cfg(AttentionMode::BlockCausal), &teacher)?;
        let clips = self.train_clips()?;
        let conds: Vec<SceneCondition> = clips.iter().map(|c| c.condition).collect();
        let metrics_path = self.artifact("metrics-generator.jsonl");
        let mut sink = JsonlSink::create(&metrics_path)?;
        let ckpt_dir = self.out_dir.clone();
        let hash = self.config_hash.clone();
        let stats = train_generator_with_checkpoints(
            &mut generator,
            &mut student,
            &teacher,
            &memory,
            &conds,
            &schedule,
            seed,
            &mut sink,
            self.cfg.train_generator.checkpoint_every,
            &mut |cycle, model| {
                model
                    .params
                    .save(&artifact_path(&ckpt_dir, &hash, &format!("generator-cycle{cycle:05}.ckpt")))
            },
        )?;
        let gen_ckpt = self.artifact("generator.ckpt");
        generator.params.save(&gen_ckpt)?;
        let student_ckpt = self.artifact("student.ckpt");
        student.params.save(&student_ckpt)?;
        println!(
            "generator: {} cycles ({} generator / {} student updates) -> {}",
            schedule.cycles,
            stats.generator_updates,
            stats.student_updates,
            gen_ckpt.display()
        );
        self.save_manifest(
            "generator",
            &[
                ("generator_ckpt", &gen_ckpt),
                ("student_ckpt", &student_ckpt),
                ("generator_metrics", &metrics_path),
            ],
        )
    }

    pub fn phase_stream(
        &mut self,
        mode: Option<&str>,
        blocks: Option<usize>,
        stream_seed: Option<u64>,
        gif: bool,
    ) -> Result<()> {
        let generator = self.load_model("generator.ckpt", "generator_ckpt", AttentionMode::BlockCausal)?;
        let memory = self.load_model(
            &format!("memory-b{}.ckpt", self.cfg.model.block_frames),
            "memory_ckpt",
            AttentionMode::BlockCausal,
        )?;
        let mode = match mode {
            Some(m) => mag_core::streaming::CacheMode::parse(m)?,
            None => self.cfg.stream.cache_mode()?,
        };
        let blocks = blocks.unwrap_or(self.cfg.stream.blocks);
        let seed = stream_seed.unwrap_or_else(|| self.cfg.phase_seed(self.seed, "stream"));
        let cond = SceneCondition::new(self.cfg.stream.scene_id, self.cfg.stream.motion_id);
        let mut session = StreamSession::new(&generator, &memory, mode, self.cfg.stream.sample_steps)?;
        let clip = stream_generate(&mut session, cond, blocks, seed)?;
        let clip_path = self.artifact(&format!("stream-{mode}.magv"));
        write_clip(&clip_path, &clip)?;
        if gif {
            export_gif(&self.artifact(&format!("stream-{mode}.gif")), &clip)?;
        }
        let summary = perf_summary(session.perf(), generator.cfg.block_frames)?;
        let perf_path = self.artifact(&format!("perf-{mode}.json"));
        std::fs::write(
            &perf_path,
            serde_json::to_string_pretty(&serde_json::json!({
                "mode": mode.to_string(),
                "summary": summary,
                "report": session.perf(),
            }))
            .expect("perf serializes"),
        )?;
        println!(
            "stream: {} blocks in mode {mode}, steady {:.2} frames/s -> {}",
            blocks, summary.steady_fps, clip_path.display()
        );
        self.save_manifest("stream", &[("stream_clip", &clip_path), ("stream_perf", &perf_path)])
    }

    fn bench_cases(&self) -> Result<Vec<BenchCase>> {
        let seed = self.cfg.phase_seed(self.seed, "bench");
        build_bench(
            seed,
            &BenchBuildConfig {
                n_cases: self.cfg.bench.n_cases,
                leg_frames: self.cfg.bench.leg_frames,
                min_offset: self.cfg.bench.min_offset,
                world: self.cfg.synth.world_config(),
            },
        )
    }

    pub fn phase_bench_build(&mut self) -> Result<()> {
        let cases = self.bench_cases()?;
        let dir = self.artifact("bench");
        std::fs::create_dir_all(&dir)?;
        let mut metas = Vec::new();
        for case in &cases {
            write_clip(&dir.join(format!("case_{:04}_memorize.magv", case.case_id)), &case.memorize)?;
            write_clip(&dir.join(format!("case_{:04}_target.magv", case.case_id)), &case.target)?;
            metas.push(BenchCaseMeta {
                case_id: case.case_id,
                world_seed: case.world_seed,
                switch_time: case.switch_time,
                memorize_len: case.memorize.t,
                target_len: case.target.t,
            });
        }
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&metas).expect("bench manifest serializes"),
        )?;
        println!("bench build: {} cases -> {}", cases.len(), dir.display());
        self.save_manifest("bench", &[("bench_dir", &dir)])
    }

    pub fn phase_bench_run(&mut self) -> Result<()> {
        let generator = self.load_model("generator.ckpt", "generator_ckpt", AttentionMode::BlockCausal)?;
        let memory = self.load_model(
            &format!("memory-b{}.ckpt", self.cfg.model.block_frames),
            "memory_ckpt",
            AttentionMode::BlockCausal,
        )?;
        let cases = self.bench_cases()?;
        let seed = self.cfg.phase_seed(self.seed, "bench-eval");
        let mode_cfg = self.cfg.stream.cache_mode()?;
        let mut reports = Vec::new();
        for mode in [EvalMode::HistoryContext, EvalMode::GroundTruth] {
            let label = format!("{mode_cfg}-{mode:?}");
            let report = evaluate_model(
                &Continuer::Model {
                    generator: &generator,
                    mode: mode_cfg,
                    sample_steps: self.cfg.bench.sample_steps,
                    null_condition: false,
                },
                &memory,
                &cases,
                mode,
                FrameMetric::PixelMse,
                &label,
                seed,
            )?;
            println!(
                "bench run [{label}]: psnr {:.2} ssim {:.3} best-match mse {:.5} ({} failed)",
                report.psnr, report.ssim, report.best_match_mse, report.failed_cases
            );
            reports.push(report);
        }
        let path = self.artifact("bench-report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&reports).expect("reports serialize"))?;
        println!("bench run -> {}", path.display());
        self.save_manifest("bench", &[("bench_report", &path)])
    }

    pub fn phase_eval(&mut self) -> Result<()> {
        let memory = self.load_model(
            &format!("memory-b{}.ckpt", self.cfg.model.block_frames),
            "memory_ckpt",
            AttentionMode::BlockCausal,
        )?;
        let test = self.test_clips()?;
        let seed = self.cfg.phase_seed(self.seed, "eval");
        let report = eval_reconstruction(&memory, &test, self.cfg.bench.sample_steps, seed)?;
        let path = self.artifact(&format!("reconstruction-b{}.json", report.b));
        std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
        println!(
            "eval: b={} psnr {:.2} ssim {:.3} mse_x100 {:.3} over {} clips -> {}",
            report.b, report.psnr, report.ssim, report.mse_x100, report.n_clips, path.display()
        );
        self.save_manifest("eval", &[("reconstruction_report", &path)])
    }

    pub fn run_pipeline(&mut self) -> Result<()> {
        let phases = self.cfg.pipeline.phases.clone();
        for phase in &phases {
            match phase.as_str() {
                "synth" => self.phase_synth()?,
                "teacher" => self.phase_teacher()?,
                "memory" => self.phase_memory(None, None)?,
                "generator" => self.phase_generator(None, None, None, None)?,
                "bench" => {
                    self.phase_bench_build()?;
                    self.phase_bench_run()?;
                }
                other => return Err(MagError::Config(format!("unknown phase '{other}'"))),
            }
        }
        Ok(())
    }
}

/// `bench compare` over stored report files.
pub fn bench_compare(paths: &[std::path::PathBuf], out_csv: Option<&Path>) -> Result<()> {
    let mut reports: Vec<EvalReport> = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p)
            .map_err(|e| MagError::Dependency(format!("cannot read report {}: {e}", p.display())))?;
        let mut batch: Vec<EvalReport> = serde_json::from_str(&text)
            .map_err(|e| MagError::Checkpoint(format!("bad report {}: {e}", p.display())))?;
        reports.append(&mut batch);
    }
    let table = compare(&reports)?;
    print!("{}", table.to_text());
    if let Some(csv) = out_csv {
        std::fs::write(csv, table.to_csv())?;
        println!("-> {}", csv.display());
    }
    Ok(())
}
