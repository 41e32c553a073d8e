//! Scratch harness for calibrating stage-2 training and the bench criteria.

use mag_core::flow::FmTask;
use mag_core::generator::{init_generator_from_memory, train_generator, TrainSchedule};
use mag_core::magbench::{build_bench, evaluate_model, BenchBuildConfig, Continuer, EvalMode, FrameMetric};
use mag_core::memory::{train_memory, MemoryTrainConfig};
use mag_core::model::mask::AttentionMask;
use mag_core::model::{patchify, token_positions, AttentionMode, Model, ModelConfig};
use mag_core::nn::{Adam, AdamConfig};
use mag_core::rng::{derive_seed, Rng};
use mag_core::runcfg::NullSink;
use mag_core::streaming::CacheMode;
use mag_core::synthworld::{make_dataset, DatasetConfig, SceneCondition};

fn acc_cfg(mode: AttentionMode) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(2, 48, 4, 6, 3);
    cfg.frame_h = 24;
    cfg.frame_w = 24;
    cfg.attention_mode = mode;
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(11);
    let teacher_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let memory_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let cycles: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(300);
    let gen_lr: f32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2e-4);
    let k: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(3);

    let data_cfg = DatasetConfig {
        clip_len: 12,
        ..DatasetConfig::default()
    };
    let train = make_dataset(derive_seed(seed, "stack-train"), 2048, &data_cfg).unwrap();
    let t0 = std::time::Instant::now();

    // Teacher.
    let mut teacher = Model::new(acc_cfg(AttentionMode::Bidirectional), derive_seed(seed, "t")).unwrap();
    let mut rng = Rng::new(derive_seed(seed, "teacher-train"));
    let mut opt = Adam::new(&teacher.params, AdamConfig::with_lr(1e-3));
    for step in 0..teacher_steps {
        let clip = &train[rng.next_below(train.len())];
        let tokens = patchify(&clip.frames, clip.t, &teacher.cfg);
        let mask = AttentionMask::bidirectional(tokens.rows(), tokens.rows());
        let task = FmTask {
            data_tokens: &tokens,
            cond: clip.condition,
            cache: None,
            positions: token_positions(0, 0, clip.t, teacher.cfg.frame_tokens()),
            mask: &mask,
        };
        let (loss, grads) = mag_core::flow::fm_loss(&teacher, &task, &mut rng).unwrap();
        opt.step(&mut teacher.params, &grads);
        if step % 500 == 0 {
            println!("teacher step {step}: loss {loss:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
        }
    }

    // Memory model.
    let mut memory = Model::new(acc_cfg(AttentionMode::BlockCausal), derive_seed(seed, "m")).unwrap();
    let mem_cfg = MemoryTrainConfig {
        steps: memory_steps,
        lr: 2e-3,
        max_blocks_per_sample: 4,
        start_offset_max: 2048,
        log_every: 2000,
    };
    train_memory(&mut memory, &train, &mem_cfg, derive_seed(seed, "memory-train"), &mut NullSink).unwrap();
    println!("memory done ({:.0}s)", t0.elapsed().as_secs_f64());

    // Stage 2, both lambdas.
    let conds: Vec<SceneCondition> = train.iter().map(|c| c.condition).collect();
    let schedule = |lambda: f64| TrainSchedule {
        k,
        lambda,
        student_per_generator: 5,
        cycles,
        clip_frames: 12,
        gen_lr,
        student_lr: gen_lr / 5.0,
        sample_steps: 4,
        log_every: 100_000,
    };
    let train_one = |lambda: f64| -> Model {
        let mut generator = init_generator_from_memory(&memory, acc_cfg(AttentionMode::BlockCausal)).unwrap();
        let mut student = Model::with_params_from(acc_cfg(AttentionMode::BlockCausal), &teacher).unwrap();
        train_generator(
            &mut generator,
            &mut student,
            &teacher,
            &memory,
            &conds,
            &schedule(lambda),
            derive_seed(seed, "stage2"),
            &mut NullSink,
        )
        .unwrap();
        generator
    };
    let (g06, g00) = rayon::join(|| train_one(0.6), || train_one(0.0));
    println!("generators done ({:.0}s)", t0.elapsed().as_secs_f64());

    let bench = build_bench(
        derive_seed(seed, "bench"),
        &BenchBuildConfig {
            n_cases: 64,
            leg_frames: 12,
            min_offset: 24,
            ..BenchBuildConfig::default()
        },
    )
    .unwrap();
    let eval = |gen: &Model, mode: EvalMode, cm: CacheMode, null: bool, label: &str| {
        let r = evaluate_model(
            &Continuer::Model {
                generator: gen,
                mode: cm,
                sample_steps: 4,
                null_condition: null,
            },
            &memory,
            &bench,
            mode,
            FrameMetric::PixelMse,
            label,
            derive_seed(seed, "eval"),
        )
        .unwrap();
        println!(
            "{label:24} psnr {:.2}  ssim {:.3}  best_mse {:.5}  aligned {:.5}  failed {}",
            r.psnr, r.ssim, r.best_match_mse, r.index_aligned_mse, r.failed_cases
        );
        r
    };
    let init = init_generator_from_memory(&memory, acc_cfg(AttentionMode::BlockCausal)).unwrap();
    eval(&init, EvalMode::HistoryContext, CacheMode::Mag, false, "init hist mag");
    let m06 = eval(&g06, EvalMode::HistoryContext, CacheMode::Mag, false, "l0.6 hist mag");
    let w06 = eval(&g06, EvalMode::HistoryContext, CacheMode::WindowBlocks(2), false, "l0.6 hist window2");
    let gt06 = eval(&g06, EvalMode::GroundTruth, CacheMode::Mag, false, "l0.6 gt mag");
    let m00 = eval(&g00, EvalMode::HistoryContext, CacheMode::Mag, false, "l0.0 hist mag");
    let gt00 = eval(&g00, EvalMode::GroundTruth, CacheMode::Mag, false, "l0.0 gt mag");
    let n06 = eval(&g06, EvalMode::HistoryContext, CacheMode::Mag, true, "l0.6 hist mag NULL");
    let n00 = eval(&g00, EvalMode::HistoryContext, CacheMode::Mag, true, "l0.0 hist mag NULL");
    println!(
        "criterion6: mag<window {}  gt>=hist(0.6) {}  gt>=hist(0.0) {}",
        m06.best_match_mse < w06.best_match_mse,
        gt06.psnr >= m06.psnr,
        gt00.psnr >= m00.psnr
    );
    println!(
        "criterion7(cond): l06<l00 {}  criterion7(null): l06<l00 {} ({:.5} vs {:.5})",
        m06.best_match_mse < m00.best_match_mse,
        n06.best_match_mse < n00.best_match_mse,
        n06.best_match_mse,
        n00.best_match_mse
    );
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
