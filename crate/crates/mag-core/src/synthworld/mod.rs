//! Procedural panorama worlds with controllable camera trajectories.
//!
//! A world is a wide texture strip; a clip is a window sliding over it, so
//! rendering is a pure function of (world, offset) and leave-and-return
//! trajectories are exactly palindromic. Textures are generated from integer
//! lattice noise and scaled at the end, which makes every output bit-exact
//! across platforms. Glyph marks stamp distinctive local patterns into the
//! strip so that a model hallucinating a forgotten region produces a large,
//! visible pixel error.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};
use crate::rng::{derive_seed_idx, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCondition {
    pub scene_id: u16,
    pub motion_id: u16,
    pub is_null: bool,
}

impl SceneCondition {
    pub fn new(scene_id: u16, motion_id: u16) -> Self {
        SceneCondition {
            scene_id,
            motion_id,
            is_null: false,
        }
    }

    pub fn null() -> Self {
        SceneCondition {
            scene_id: 0,
            motion_id: 0,
            is_null: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Pan,
    LeaveReturn,
    Static,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CameraTrajectory {
    pub offsets: Vec<usize>,
    /// Frame index where the return leg begins (leave-return only).
    pub switch_time: Option<usize>,
    pub kind: TrajectoryKind,
}

impl CameraTrajectory {
    /// Leave-return trajectories must mirror around the switch frame.
    pub fn is_palindromic(&self) -> bool {
        match self.switch_time {
            None => false,
            Some(s) => {
                let n = self.offsets.len();
                (1..n.saturating_sub(s)).all(|i| i <= s && self.offsets[s + i] == self.offsets[s - i])
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    /// Texture strip, row-major (h, w), values in [0, 1].
    pub strip: Vec<f32>,
    /// (column, glyph id) of each stamped mark.
    pub object_marks: Vec<(usize, u8)>,
}

#[derive(Clone, Debug)]
pub struct VideoClip {
    /// (t, h, w, c) row-major, values in [0, 1].
    pub frames: Vec<f32>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub condition: SceneCondition,
    pub trajectory: Option<CameraTrajectory>,
}

impl VideoClip {
    pub fn frame(&self, i: usize) -> &[f32] {
        let fv = self.h * self.w * self.c;
        &self.frames[i * fv..(i + 1) * fv]
    }

    pub fn frame_values(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Sub-clip [start, start+len).
    pub fn slice_frames(&self, start: usize, len: usize) -> VideoClip {
        assert!(start + len <= self.t);
        let fv = self.frame_values();
        VideoClip {
            frames: self.frames[start * fv..(start + len) * fv].to_vec(),
            t: len,
            h: self.h,
            w: self.w,
            c: self.c,
            condition: self.condition,
            trajectory: None,
        }
    }

    /// Frames in reverse temporal order.
    pub fn reversed(&self) -> VideoClip {
        let fv = self.frame_values();
        let mut frames = Vec::with_capacity(self.frames.len());
        for i in (0..self.t).rev() {
            frames.extend_from_slice(&self.frames[i * fv..(i + 1) * fv]);
        }
        VideoClip {
            frames,
            t: self.t,
            h: self.h,
            w: self.w,
            c: self.c,
            condition: self.condition,
            trajectory: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    pub world_w: usize,
    /// Number of texture families; a family fixes coarse statistics
    /// (noise scale, glyph density) without pinning exact pixels.
    pub scene_families: u16,
    /// Camera speed cap, columns per frame.
    pub max_step: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            frame_h: 24,
            frame_w: 24,
            world_w: 256,
            scene_families: 8,
            max_step: 4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_h == 0 || self.frame_w == 0 || self.world_w == 0 {
            return Err(MagError::Config("world dimensions must be positive".into()));
        }
        if self.world_w < 4 * self.frame_w {
            return Err(MagError::Config(format!(
                "world width {} < 4x frame width {}; camera cannot leave the scene",
                self.world_w, self.frame_w
            )));
        }
        if self.max_step == 0 {
            return Err(MagError::Config("max_step must be >= 1".into()));
        }
        Ok(())
    }

    pub fn family_of(&self, world_seed: u64) -> u16 {
        (world_seed % self.scene_families as u64) as u16
    }
}

/// 5x5 glyph bitmaps: box, cross, diagonal, dot-grid, ring, checker.
const GLYPHS: [[u8; 25]; 6] = [
    [1,1,1,1,1, 1,0,0,0,1, 1,0,0,0,1, 1,0,0,0,1, 1,1,1,1,1],
    [0,0,1,0,0, 0,0,1,0,0, 1,1,1,1,1, 0,0,1,0,0, 0,0,1,0,0],
    [1,0,0,0,0, 0,1,0,0,0, 0,0,1,0,0, 0,0,0,1,0, 0,0,0,0,1],
    [1,0,1,0,1, 0,0,0,0,0, 1,0,1,0,1, 0,0,0,0,0, 1,0,1,0,1],
    [0,1,1,1,0, 1,0,0,0,1, 1,0,0,0,1, 1,0,0,0,1, 0,1,1,1,0],
    [1,0,1,0,1, 0,1,0,1,0, 1,0,1,0,1, 0,1,0,1,0, 1,0,1,0,1],
];

/// Interpolated integer lattice noise in milli-units; exact integer
/// arithmetic keeps worlds bit-identical across platforms.
fn value_noise(seed: u64, h: usize, w: usize, pitch: usize) -> Vec<i64> {
    let mut rng = Rng::new(seed);
    let gh = h / pitch + 2;
    let gw = w / pitch + 2;
    let lattice: Vec<i64> = (0..gh * gw).map(|_| (rng.next_u32() % 1000) as i64).collect();
    let mut out = vec![0i64; h * w];
    for y in 0..h {
        let gy = y / pitch;
        let fy = (y % pitch) as i64;
        for x in 0..w {
            let gx = x / pitch;
            let fx = (x % pitch) as i64;
            let p = pitch as i64;
            let v00 = lattice[gy * gw + gx];
            let v01 = lattice[gy * gw + gx + 1];
            let v10 = lattice[(gy + 1) * gw + gx];
            let v11 = lattice[(gy + 1) * gw + gx + 1];
            let top = v00 * (p - fx) + v01 * fx;
            let bot = v10 * (p - fx) + v11 * fx;
            out[y * w + x] = (top * (p - fy) + bot * fy) / (p * p);
        }
    }
    out
}

/// Deterministic world synthesis. A world blends a family-shared base
/// pattern (the part a scene id can predict — this is what makes the
/// conditioning channel genuinely informative) with seed-specific lattice
/// noise, a per-column hash ripple that guarantees per-column variance, and
/// 3-6 stamped glyphs at seed-specific spots.
pub fn build_world(seed: u64, cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (h, w) = (cfg.frame_h, cfg.world_w);
    let family = cfg.family_of(seed);
    // Family fixes the noise lattice pitch: coarser families look smoother.
    let pitch = 4 + 2 * (family as usize % 3);
    let family_base = value_noise(derive_seed_idx(0xFA417, family as u64), h, w, pitch + 1);
    let detail = value_noise(derive_seed_idx(seed, 0xA0), h, w, pitch);

    let mut milli = vec![0i64; h * w];
    for x in 0..w {
        // +-60 milli-units from the column hash, so every column has nonzero
        // variance against its neighbours.
        let r = (derive_seed_idx(seed, 0xc01 + x as u64) % 121) as i64 - 60;
        for y in 0..h {
            let i = y * w + x;
            let blended = (45 * family_base[i] + 35 * detail[i]) / 100;
            milli[i] = (blended * 7 / 10) + 150 + r + ((y as i64 * 13 + x as i64 * 7) % 23);
        }
    }

    // Stamp glyphs; count depends on the family so glyph density is a
    // family-level statistic.
    let n_glyphs = 3 + ((family as usize) + (seed as usize % 2)) % 4;
    let mut marks = Vec::new();
    let mut grng = Rng::new(derive_seed_idx(seed, 0x91f));
    for _ in 0..n_glyphs {
        let col = 4 + grng.next_below(w - 12);
        let row = 2 + grng.next_below(h - 9);
        let gid = (grng.next_below(GLYPHS.len())) as u8;
        let bright = grng.bernoulli(0.5);
        for dy in 0..5 {
            for dx in 0..5 {
                if GLYPHS[gid as usize][dy * 5 + dx] == 1 {
                    milli[(row + dy) * w + (col + dx)] = if bright { 1000 } else { 0 };
                }
            }
        }
        marks.push((col, gid));
    }

    let strip: Vec<f32> = milli
        .iter()
        .map(|&m| (m.clamp(0, 1000) as f32) / 1000.0)
        .collect();
    let world = World {
        seed,
        h,
        w,
        strip,
        object_marks: marks,
    };
    debug_assert!(min_column_variance(&world) > 1e-5);
    Ok(world)
}

/// Smallest per-column variance across the strip.
pub fn min_column_variance(world: &World) -> f64 {
    let (h, w) = (world.h, world.w);
    let mut min_var = f64::MAX;
    for x in 0..w {
        let mut s = 0.0f64;
        let mut sq = 0.0f64;
        for y in 0..h {
            let v = world.strip[y * w + x] as f64;
            s += v;
            sq += v * v;
        }
        let mean = s / h as f64;
        min_var = min_var.min(sq / h as f64 - mean * mean);
    }
    min_var
}

/// Render the window of the strip at each trajectory offset.
pub fn render_clip(world: &World, traj: &CameraTrajectory, frame_w: usize, cond: SceneCondition) -> Result<VideoClip> {
    let h = world.h;
    let mut frames = Vec::with_capacity(traj.offsets.len() * h * frame_w);
    for &off in &traj.offsets {
        if off + frame_w > world.w {
            return Err(MagError::Bounds(format!(
                "offset {off} + frame width {frame_w} exceeds world width {}",
                world.w
            )));
        }
        for y in 0..h {
            frames.extend_from_slice(&world.strip[y * world.w + off..y * world.w + off + frame_w]);
        }
    }
    Ok(VideoClip {
        t: traj.offsets.len(),
        frames,
        h,
        w: frame_w,
        c: 1,
        condition: cond,
        trajectory: Some(traj.clone()),
    })
}

/// Build the palindromic trajectory 0 -> max_offset -> back, length T.
pub fn leave_return_trajectory(t_len: usize, max_offset: usize, max_step: usize) -> Result<CameraTrajectory> {
    if t_len < 4 || !t_len.is_multiple_of(2) {
        return Err(MagError::Config(format!(
            "leave-return length must be even and >= 4, got {t_len}"
        )));
    }
    if max_offset == 0 {
        return Err(MagError::Config("max_offset must be >= 1".into()));
    }
    let half = t_len / 2;
    if max_offset > half * max_step {
        return Err(MagError::Config(format!(
            "max_offset {max_offset} unreachable within {half} frames at step {max_step}"
        )));
    }
    let mut offsets = Vec::with_capacity(t_len);
    for i in 0..=half {
        offsets.push((i * max_offset + half / 2) / half);
    }
    for i in 1..t_len - half {
        offsets.push(offsets[half - i]);
    }
    debug_assert_eq!(offsets.len(), t_len);
    Ok(CameraTrajectory {
        offsets,
        switch_time: Some(half),
        kind: TrajectoryKind::LeaveReturn,
    })
}

/// Clip whose camera leaves the scene and returns through every visited
/// offset; frames after the switch are the time-reversed pre-switch frames.
pub fn make_leave_return(world: &World, t_len: usize, max_offset: usize, cfg: &WorldConfig, cond: SceneCondition) -> Result<VideoClip> {
    if max_offset + cfg.frame_w > world.w {
        return Err(MagError::Config(format!(
            "max_offset {max_offset} leaves no room for frame width {} in world width {}",
            cfg.frame_w, world.w
        )));
    }
    let traj = leave_return_trajectory(t_len, max_offset, cfg.max_step)?;
    render_clip(world, &traj, cfg.frame_w, cond)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub clip_len: usize,
    pub p_pan: f64,
    pub p_leave_return: f64,
    pub p_static: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            world: WorldConfig::default(),
            clip_len: 12,
            p_pan: 0.35,
            p_leave_return: 0.5,
            p_static: 0.15,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.clip_len == 0 {
            return Err(MagError::Config("clip_len must be positive".into()));
        }
        let total = self.p_pan + self.p_leave_return + self.p_static;
        if !(0.999..=1.001).contains(&total) {
            return Err(MagError::Config(format!(
                "trajectory proportions sum to {total}, expected 1.0"
            )));
        }
        Ok(())
    }
}

fn motion_id(kind: TrajectoryKind) -> u16 {
    match kind {
        TrajectoryKind::Pan => 0,
        TrajectoryKind::LeaveReturn => 1,
        TrajectoryKind::Static => 2,
    }
}

/// Clip `idx` of the dataset stream. Each index is independently seeded, so
/// shards can be generated in any order or in parallel.
pub fn dataset_clip(seed: u64, idx: u64, cfg: &DatasetConfig) -> Result<VideoClip> {
    cfg.validate()?;
    let world_seed = derive_seed_idx(seed, idx);
    let world = build_world(world_seed, &cfg.world)?;
    let mut rng = Rng::new(derive_seed_idx(world_seed, 0x7A));
    let t_len = cfg.clip_len;
    let span = cfg.world.world_w - cfg.world.frame_w;
    let draw = rng.next_f64();
    let kind = if draw < cfg.p_pan {
        TrajectoryKind::Pan
    } else if draw < cfg.p_pan + cfg.p_leave_return {
        TrajectoryKind::LeaveReturn
    } else {
        TrajectoryKind::Static
    };
    let cond = SceneCondition::new(cfg.world.family_of(world_seed), motion_id(kind));
    let traj = match kind {
        TrajectoryKind::Static => {
            let off = rng.next_below(span + 1);
            CameraTrajectory {
                offsets: vec![off; t_len],
                switch_time: None,
                kind,
            }
        }
        TrajectoryKind::Pan => {
            let step = 1 + rng.next_below(cfg.world.max_step);
            let travel = step * (t_len - 1);
            let start = rng.next_below(span.saturating_sub(travel).max(1).min(span + 1));
            let dir_right = rng.bernoulli(0.5) && start + travel <= span;
            let offsets = (0..t_len)
                .map(|i| {
                    if dir_right {
                        (start + i * step).min(span)
                    } else {
                        start.saturating_sub(i * step)
                    }
                })
                .collect();
            CameraTrajectory {
                offsets,
                switch_time: None,
                kind,
            }
        }
        TrajectoryKind::LeaveReturn => {
            if t_len < 4 || !t_len.is_multiple_of(2) {
                // Clip too short for a return leg; fall back to pan.
                let offsets = (0..t_len).map(|i| i.min(span)).collect();
                CameraTrajectory {
                    offsets,
                    switch_time: None,
                    kind: TrajectoryKind::Pan,
                }
            } else {
                let half = t_len / 2;
                let max_reach = (half * cfg.world.max_step).min(span);
                let max_offset = 1 + rng.next_below(max_reach);
                leave_return_trajectory(t_len, max_offset, cfg.world.max_step)?
            }
        }
    };
    render_clip(&world, &traj, cfg.world.frame_w, cond)
}

/// A deterministic stream of `n` clips mixing trajectory kinds per the
/// configured proportions.
pub fn make_dataset(seed: u64, n: usize, cfg: &DatasetConfig) -> Result<Vec<VideoClip>> {
    if n == 0 {
        return Err(MagError::Config("dataset size must be positive".into()));
    }
    (0..n as u64).map(|i| dataset_clip(seed, i, cfg)).collect()
}
