//! Scratch harness for calibrating the stage-1 training budget.

use mag_core::memory::{build_memory_batch, eval_reconstruction, memory_batch_loss, MemoryTrainConfig};
use mag_core::model::{AttentionMode, Model, ModelConfig};
use mag_core::nn::{Adam, AdamConfig};
use mag_core::rng::{derive_seed, Rng};
use mag_core::synthworld::{make_dataset, DatasetConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let b: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let lr: f32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8e-4);
    let d_model: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(48);
    let layers: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2);

    let mut cfg = ModelConfig::tiny(layers, d_model, 4, 6, b);
    cfg.frame_h = 24;
    cfg.frame_w = 24;
    cfg.attention_mode = AttentionMode::BlockCausal;
    let data_cfg = DatasetConfig {
        clip_len: 20,
        ..DatasetConfig::default()
    };
    let seed = 101u64;
    let n_train: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(2048);
    let train = make_dataset(derive_seed(seed, "sweep-train"), n_train, &data_cfg).unwrap();
    let test = make_dataset(derive_seed(seed, "sweep-test"), 6, &data_cfg).unwrap();

    let mut model = Model::new(cfg.clone(), seed).unwrap();
    let mut rng = Rng::new(derive_seed(seed, "probe"));
    let mut opt = Adam::new(&model.params, AdamConfig::with_lr(lr));
    let f = cfg.frame_tokens();
    let max_blocks = (16 / b).clamp(1, 8);
    let tcfg = MemoryTrainConfig {
        steps,
        lr,
        max_blocks_per_sample: max_blocks,
        start_offset_max: 2048,
        log_every: 50,
    };
    println!("f={f} max_blocks={max_blocks}");
    let t0 = std::time::Instant::now();
    for step in 0..tcfg.steps {
        let clip = &train[rng.next_below(train.len())];
        let n_blocks = 1 + rng.next_below(tcfg.max_blocks_per_sample);
        let want = (n_blocks * b).min(clip.t / b * b);
        let start = rng.next_below(clip.t - want + 1);
        let cropped = clip.slice_frames(start, want);
        let s_off = rng.next_below(tcfg.start_offset_max as usize + 1) as u32;
        let batch = build_memory_batch(&cropped, &cfg, s_off, &mut rng).unwrap();
        let (loss, grads) = memory_batch_loss(&model, &batch, true).unwrap();
        opt.step(&mut model.params, &grads);
        if step % 100 == 0 || step + 1 == tcfg.steps {
            println!("step {step:5}  loss {loss:.5}  ({:.1}s)", t0.elapsed().as_secs_f64());
        }
        if step % 500 == 499 {
            let r = eval_reconstruction(&model, &test, 4, 7).unwrap();
            // Loss by interpolant time on a fixed probe clip.
            let probe = test[0].slice_frames(0, 2 * b);
            let mut by_t = String::new();
            for &tv in &[0.1f32, 0.3, 0.5, 0.7, 0.9] {
                let mut trng = Rng::new(4242);
                let mut batch = build_memory_batch(&probe, &cfg, 0, &mut trng).unwrap();
                // Rebuild the noise half at fixed t.
                let clean = mag_core::model::patchify(&probe.frames, probe.t, &cfg);
                let bt = cfg.block_tokens();
                let mut parts = Vec::new();
                let mut targets = Vec::new();
                let mut nrng = Rng::new(777);
                for blk in 0..batch.n_blocks {
                    let x1 = clean.slice_rows(blk * bt, bt);
                    let s = mag_core::flow::flow_sample(&x1, tv, &mut nrng);
                    parts.push(s.xt);
                    targets.push(s.v_target);
                }
                let noise_half = mag_core::nn::Tensor::concat_rows(&parts.iter().collect::<Vec<_>>());
                batch.tokens = mag_core::nn::Tensor::concat_rows(&[&noise_half, &clean]);
                batch.noise_targets = mag_core::nn::Tensor::concat_rows(&targets.iter().collect::<Vec<_>>());
                for (i, t) in batch.t_tokens.iter_mut().enumerate() {
                    if i < batch.n_blocks * bt {
                        *t = tv;
                    }
                }
                let (l, _) = memory_batch_loss(&model, &batch, false).unwrap();
                by_t.push_str(&format!("t{tv}: {l:.3}  "));
            }
            println!(
                "  eval @ {step}: psnr {:.2}  ssim {:.3}  mse_x100 {:.3}  | {by_t}",
                r.psnr, r.ssim, r.mse_x100
            );
        }
    }
    let r = eval_reconstruction(&model, &test, 4, 7).unwrap();
    println!(
        "final b={b}: psnr {:.2}  ssim {:.3}  mse_x100 {:.3}  ({:.1}s)",
        r.psnr,
        r.ssim,
        r.mse_x100,
        t0.elapsed().as_secs_f64()
    );
}
