//! Stage-2 rolling long-video training.
//!
//! Each cycle rolls a long video out of the generator: k clips, each built
//! block-by-block with the frozen memory model re-encoding every finished
//! block into the compressed cache. Clips past the first may be generated
//! under the empty condition (probability lambda). The student then takes
//! several flow-matching updates on uniformly sampled clips (its proxy of
//! the generator's output distribution is history-conditional), and the
//! generator takes one score-difference update on a uniformly sampled clip.
//! The teacher and memory model stay frozen throughout.

use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};
use crate::flow::dmd::{dmd_generator_step, history_condition_sample, ClipRecord, DmdConfig};
use crate::flow::{draw_t, few_step_sample, flow_sample};
use crate::memory::{block_meta, encode_block};
use crate::model::mask::build_inference_mask;
use crate::model::{token_positions, ForwardInput, KvCache, Model, ModelConfig, RetentionPolicy, TokenInput};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::rng::{derive_seed, derive_seed_idx, Rng};
use crate::runcfg::{MetricRecord, MetricSink};
use crate::synthworld::SceneCondition;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Clips per long video.
    pub k: usize,
    /// Probability of the empty condition for clips beyond the first.
    pub lambda: f64,
    /// Student updates per generator update.
    pub student_per_generator: usize,
    /// Rollout + update cycles; total updates = cycles * (ratio + 1).
    pub cycles: usize,
    pub clip_frames: usize,
    pub gen_lr: f32,
    pub student_lr: f32,
    pub sample_steps: usize,
    pub log_every: usize,
}

impl TrainSchedule {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.k < 1 {
            return Err(MagError::Config("schedule needs k >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(MagError::Config(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.student_per_generator < 1 {
            return Err(MagError::Config("student:generator ratio must be >= 1".into()));
        }
        if !self.clip_frames.is_multiple_of(cfg.block_frames) {
            return Err(MagError::Config(format!(
                "clip_frames {} not divisible by block_frames {}",
                self.clip_frames, cfg.block_frames
            )));
        }
        Ok(())
    }
}

pub struct Rollout {
    pub clips: Vec<ClipRecord>,
    pub final_cache: KvCache,
}

/// Noise for one generated block; both the streaming path and its offline
/// recompute oracle must draw through this.
pub fn block_noise(seed: u64, block_index: u64, tokens: usize, patch_dim: usize) -> Tensor {
    let mut rng = Rng::new(derive_seed_idx(seed, block_index));
    Tensor::randn(vec![tokens, patch_dim], 1.0, &mut rng)
}

/// Autoregressively generate `k` clips. The generator samples each block
/// conditioned on the compressed cache; the frozen memory model re-encodes
/// every finished block under last-frame retention. Per-clip conditions are
/// drawn by `history_condition_sample`.
pub fn rollout_long(
    generator: &Model,
    memory: &Model,
    cond: SceneCondition,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<Rollout> {
    let cfg = &generator.cfg;
    schedule.validate(cfg)?;
    let f = cfg.frame_tokens();
    let b = cfg.block_frames;
    let blocks_per_clip = schedule.clip_frames / b;
    let mut cache = KvCache::new(cfg.layers, cfg.d_model, RetentionPolicy::LastFrame);
    let mut cond_rng = Rng::new(derive_seed(seed, "conds"));
    let mut clips = Vec::with_capacity(schedule.k);
    let mut frame_clock = 0u32;
    let mut block_clock = 0u64;
    for i in 1..=schedule.k {
        let cond_used = history_condition_sample(schedule.lambda, cond, i, &mut cond_rng);
        let mut block_noise_v = Vec::with_capacity(blocks_per_clip);
        let mut block_caches = Vec::with_capacity(blocks_per_clip);
        let mut block_positions = Vec::with_capacity(blocks_per_clip);
        let mut block_tokens_v = Vec::with_capacity(blocks_per_clip);
        let mut clip_positions = Vec::new();
        for _ in 0..blocks_per_clip {
            let positions = token_positions(0, frame_clock, b, f);
            let noise = block_noise(seed, block_clock, cfg.block_tokens(), cfg.patch_dim());
            block_caches.push(cache.clone());
            let x = few_step_sample(
                generator,
                &noise,
                cond_used,
                Some(&cache),
                &positions,
                schedule.sample_steps,
            )?;
            // The frozen memory model writes the cache, not the generator.
            let kv = encode_block(memory, &x, &positions, &cache)?;
            let meta = block_meta(cfg, 0, frame_clock, cache.max_block().map_or(0, |v| v + 1));
            cache.append_block(&kv, &meta)?;

            clip_positions.extend_from_slice(&positions);
            block_positions.push(positions);
            block_noise_v.push(noise);
            block_tokens_v.push(x);
            frame_clock += b as u32;
            block_clock += 1;
        }
        let tokens = Tensor::concat_rows(&block_tokens_v.iter().collect::<Vec<_>>());
        clips.push(ClipRecord {
            index: i,
            cond_true: cond,
            cond_used,
            block_noise: block_noise_v,
            block_caches,
            block_positions,
            tokens,
            clip_positions,
            n_frames: schedule.clip_frames,
        });
    }
    Ok(Rollout {
        clips,
        final_cache: cache,
    })
}

/// Generator weights start as the trained memory model's weights so the
/// cache feature space is shared; training then diverges the generator while
/// the memory model stays frozen.
pub fn init_generator_from_memory(memory: &Model, cfg: ModelConfig) -> Result<Model> {
    if !cfg.same_shape(&memory.cfg) {
        return Err(MagError::Checkpoint(
            "generator config is not weight-compatible with the memory model".into(),
        ));
    }
    Model::with_params_from(cfg, memory)
}

pub struct GenTrainStats {
    /// Clip-index histogram over generator updates (1-indexed bins).
    pub gen_i_counts: Vec<u64>,
    /// Clip-index histogram over all sampled updates.
    pub all_i_counts: Vec<u64>,
    pub generator_updates: u64,
    pub student_updates: u64,
}

/// One student flow-matching update on a rollout clip treated as data.
fn student_update(
    student: &mut Model,
    opt: &mut Adam,
    clip: &ClipRecord,
    rng: &mut Rng,
) -> Result<f32> {
    let t = draw_t(rng);
    let sample = flow_sample(&clip.tokens, t, rng);
    let n = clip.tokens.rows();
    let history = &clip.block_caches[0];
    let mask = build_inference_mask(history.len(), n);
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let out = student.forward(
        &mut g,
        &bound,
        &ForwardInput {
            tokens: TokenInput::Const(sample.xt.clone()),
            t_tokens: vec![t; n],
            positions: clip.clip_positions.clone(),
            cond: clip.cond_used,
            cache: Some(history),
            mask: &mask,
        },
    )?;
    let loss = g.mean_sq_diff(out.velocity, sample.v_target.clone());
    let loss_val = g.value(loss).scalar();
    if !loss_val.is_finite() {
        return Err(MagError::Numeric("student loss is non-finite".into()));
    }
    let grads = g.backward(loss);
    let grad_map = student.collect_grads(&bound, &grads);
    opt.step(&mut student.params, &grad_map);
    Ok(loss_val)
}

/// Stage-2 training loop. `conds` are the scene conditions rollouts draw
/// from. Emits one metrics record per update.
#[allow(clippy::too_many_arguments)]
pub fn train_generator(
    generator: &mut Model,
    student: &mut Model,
    teacher: &Model,
    memory: &Model,
    conds: &[SceneCondition],
    schedule: &TrainSchedule,
    seed: u64,
    sink: &mut dyn MetricSink,
) -> Result<GenTrainStats> {
    train_generator_with_checkpoints(
        generator, student, teacher, memory, conds, schedule, seed, sink, 0, &mut |_, _| Ok(()),
    )
}

/// As [`train_generator`], invoking `on_checkpoint(cycle, generator)` every
/// `checkpoint_every` cycles (0 disables).
#[allow(clippy::too_many_arguments)]
pub fn train_generator_with_checkpoints(
    generator: &mut Model,
    student: &mut Model,
    teacher: &Model,
    memory: &Model,
    conds: &[SceneCondition],
    schedule: &TrainSchedule,
    seed: u64,
    sink: &mut dyn MetricSink,
    checkpoint_every: usize,
    on_checkpoint: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<GenTrainStats> {
    schedule.validate(&generator.cfg)?;
    if conds.is_empty() {
        return Err(MagError::Config("generator training needs conditions to sample".into()));
    }
    let teacher_hash = teacher.params.content_hash();
    let memory_hash = memory.params.content_hash();

    let mut rng = Rng::new(derive_seed(seed, "train-generator"));
    let mut gen_opt = Adam::new(&generator.params, AdamConfig::with_lr(schedule.gen_lr));
    let mut student_opt = Adam::new(&student.params, AdamConfig::with_lr(schedule.student_lr));
    let dmd_cfg = DmdConfig {
        normalize: true,
        sample_steps: schedule.sample_steps,
    };
    let mut stats = GenTrainStats {
        gen_i_counts: vec![0; schedule.k],
        all_i_counts: vec![0; schedule.k],
        generator_updates: 0,
        student_updates: 0,
    };
    let mut step: u64 = 0;
    let mut initial_loss: Option<f32> = None;
    let mut high_streak = 0usize;
    for cycle in 0..schedule.cycles {
        let cond = conds[rng.next_below(conds.len())];
        let rollout = rollout_long(
            generator,
            memory,
            cond,
            schedule,
            derive_seed_idx(seed, cycle as u64),
        )?;

        for _ in 0..schedule.student_per_generator {
            let i = 1 + rng.next_below(schedule.k);
            stats.all_i_counts[i - 1] += 1;
            let clip = &rollout.clips[i - 1];
            let loss = student_update(student, &mut student_opt, clip, &mut rng)?;
            stats.student_updates += 1;
            let init = *initial_loss.get_or_insert(loss);
            if loss > 10.0 * init {
                high_streak += 1;
                if high_streak >= 100 {
                    return Err(MagError::Training(format!(
                        "generator training diverged: student loss {loss:.4} above 10x initial {init:.4}"
                    )));
                }
            } else {
                high_streak = 0;
            }
            if step.is_multiple_of(schedule.log_every as u64) {
                sink.record(&MetricRecord {
                    step,
                    loss_name: "student_fm".into(),
                    value: loss as f64,
                    lambda_draw: Some(clip.cond_used.is_null),
                    i: Some(i),
                    t: None,
                });
            }
            step += 1;
        }

        let i = 1 + rng.next_below(schedule.k);
        stats.all_i_counts[i - 1] += 1;
        stats.gen_i_counts[i - 1] += 1;
        let clip = &rollout.clips[i - 1];
        let (grads, info) = dmd_generator_step(generator, student, teacher, clip, &dmd_cfg, &mut rng)?;
        gen_opt.step(&mut generator.params, &grads);
        stats.generator_updates += 1;
        if step.is_multiple_of(schedule.log_every as u64) {
            sink.record(&MetricRecord {
                step,
                loss_name: "dmd_surrogate".into(),
                value: info.surrogate as f64,
                lambda_draw: Some(info.lambda_draw),
                i: Some(i),
                t: Some(info.t),
            });
            sink.record(&MetricRecord {
                step,
                loss_name: "dmd_direction_mean_abs".into(),
                value: info.direction_mean_abs as f64,
                lambda_draw: Some(info.lambda_draw),
                i: Some(i),
                t: Some(info.t),
            });
        }
        step += 1;
        if checkpoint_every > 0 && (cycle + 1) % checkpoint_every == 0 {
            on_checkpoint(cycle + 1, generator)?;
        }
    }

    debug_assert_eq!(teacher.params.content_hash(), teacher_hash);
    debug_assert_eq!(memory.params.content_hash(), memory_hash);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionMode;

    fn tiny_cfg() -> ModelConfig {
        let mut c = ModelConfig::tiny(1, 16, 2, 12, 2);
        c.frame_h = 12;
        c.frame_w = 12;
        c
    }

    fn schedule(k: usize) -> TrainSchedule {
        TrainSchedule {
            k,
            lambda: 0.5,
            student_per_generator: 2,
            cycles: 1,
            clip_frames: 4,
            gen_lr: 1e-4,
            student_lr: 1e-4,
            sample_steps: 2,
            log_every: 1,
        }
    }

    #[test]
    fn rollout_cache_grows_one_frame_per_block() {
        let cfg = tiny_cfg();
        let generator = Model::new(cfg.clone(), 1).unwrap();
        let memory = Model::new(cfg.clone(), 2).unwrap();
        let sched = schedule(3);
        let r = rollout_long(&generator, &memory, SceneCondition::new(0, 0), &sched, 9).unwrap();
        assert_eq!(r.clips.len(), 3);
        // k clips x 2 blocks each, last-frame retention -> f entries per block.
        let f = cfg.frame_tokens();
        assert_eq!(r.final_cache.len(), 3 * 2 * f);
        // First clip always keeps its condition.
        assert!(!r.clips[0].cond_used.is_null);
    }

    #[test]
    fn rollout_is_deterministic() {
        let cfg = tiny_cfg();
        let generator = Model::new(cfg.clone(), 1).unwrap();
        let memory = Model::new(cfg.clone(), 2).unwrap();
        let sched = schedule(2);
        let a = rollout_long(&generator, &memory, SceneCondition::new(1, 0), &sched, 42).unwrap();
        let b = rollout_long(&generator, &memory, SceneCondition::new(1, 0), &sched, 42).unwrap();
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert_eq!(x.tokens.data(), y.tokens.data());
            assert_eq!(x.cond_used, y.cond_used);
        }
    }

    #[test]
    fn k1_never_nulls() {
        let cfg = tiny_cfg();
        let generator = Model::new(cfg.clone(), 1).unwrap();
        let memory = Model::new(cfg.clone(), 2).unwrap();
        let mut sched = schedule(1);
        sched.lambda = 1.0;
        let r = rollout_long(&generator, &memory, SceneCondition::new(1, 1), &sched, 3).unwrap();
        assert!(!r.clips[0].cond_used.is_null);
        assert!(r.clips[0].block_caches[0].is_empty());
    }

    #[test]
    fn init_from_memory_shares_weights_then_diverges() {
        let cfg = tiny_cfg();
        let memory = Model::new(cfg.clone(), 5).unwrap();
        let mut generator = init_generator_from_memory(&memory, cfg.clone()).unwrap();
        assert_eq!(generator.params.content_hash(), memory.params.content_hash());
        let mut student = Model::new(cfg.clone(), 6).unwrap();
        let teacher = {
            let mut tc = cfg.clone();
            tc.attention_mode = AttentionMode::Bidirectional;
            Model::new(tc, 7).unwrap()
        };
        let sched = schedule(2);
        let mut sink = crate::runcfg::NullSink;
        let stats = train_generator(
            &mut generator,
            &mut student,
            &teacher,
            &memory,
            &[SceneCondition::new(0, 0)],
            &sched,
            11,
            &mut sink,
        )
        .unwrap();
        assert_eq!(stats.generator_updates, 1);
        assert_eq!(stats.student_updates, 2);
        assert_ne!(generator.params.content_hash(), memory.params.content_hash());
    }

    #[test]
    fn update_ratio_counters_are_exact() {
        let cfg = tiny_cfg();
        let memory = Model::new(cfg.clone(), 5).unwrap();
        let mut generator = init_generator_from_memory(&memory, cfg.clone()).unwrap();
        let mut student = Model::new(cfg.clone(), 6).unwrap();
        let teacher = {
            let mut tc = cfg.clone();
            tc.attention_mode = AttentionMode::Bidirectional;
            Model::new(tc, 7).unwrap()
        };
        let mut sched = schedule(2);
        sched.student_per_generator = 5;
        sched.cycles = 4;
        let stats = train_generator(
            &mut generator,
            &mut student,
            &teacher,
            &memory,
            &[SceneCondition::new(0, 0)],
            &sched,
            13,
            &mut crate::runcfg::NullSink,
        )
        .unwrap();
        // ratio 5 over 24 updates: exactly 4 generator and 20 student.
        assert_eq!(stats.generator_updates, 4);
        assert_eq!(stats.student_updates, 20);
        assert_eq!(stats.gen_i_counts.iter().sum::<u64>(), 4);
        assert_eq!(stats.all_i_counts.iter().sum::<u64>(), 24);
    }

    #[test]
    fn clip_index_draws_are_uniform() {
        // The clip index sampler behind both update kinds: i = 1 + U{0..k}.
        let k = 7;
        let mut rng = Rng::new(41);
        let mut bins = vec![0u64; k];
        for _ in 0..7000 {
            bins[rng.next_below(k)] += 1;
        }
        for (i, &count) in bins.iter().enumerate() {
            assert!(
                (900..=1100).contains(&count),
                "bin {i} has {count} of 7000 draws"
            );
        }
        // Over any window of 1000 consecutive draws, each bin stays within
        // 10% of uniform in expectation terms (checked on disjoint windows).
        let mut rng = Rng::new(42);
        for _ in 0..5 {
            let mut window = vec![0u64; k];
            for _ in 0..1000 {
                window[rng.next_below(k)] += 1;
            }
            for &count in &window {
                let expected = 1000.0 / k as f64;
                assert!((count as f64 - expected).abs() < 0.35 * expected);
            }
        }
    }

    #[test]
    fn incompatible_config_rejected() {
        let cfg = tiny_cfg();
        let memory = Model::new(cfg.clone(), 5).unwrap();
        let mut other = cfg;
        other.d_model = 32;
        assert!(matches!(
            init_generator_from_memory(&memory, other),
            Err(MagError::Checkpoint(_))
        ));
    }
}
