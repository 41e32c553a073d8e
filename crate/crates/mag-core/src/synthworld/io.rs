//! Clip serialization.
//!
//! Binary format: 24-byte header — magic "MAGV", version u32, then T, H, W, C
//! as u32 — followed by T*C*H*W little-endian f32 values, frame-major with
//! one plane per channel inside a frame. PNG and animated GIF exporters are
//! provided for visual inspection of grayscale clips.

use std::io::{Read, Write};
use std::path::Path;

use super::{SceneCondition, VideoClip};
use crate::error::{MagError, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"MAGV";
pub const CLIP_VERSION: u32 = 1;

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + clip.frames.len() * 4);
    buf.extend_from_slice(CLIP_MAGIC);
    for v in [CLIP_VERSION, clip.t as u32, clip.h as u32, clip.w as u32, clip.c as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    // Planar: per frame, per channel, an (h, w) plane.
    for t in 0..clip.t {
        let frame = clip.frame(t);
        for ch in 0..clip.c {
            for y in 0..clip.h {
                for x in 0..clip.w {
                    buf.extend_from_slice(&frame[(y * clip.w + x) * clip.c + ch].to_le_bytes());
                }
            }
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| MagError::Dependency(format!("cannot open clip {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[0..4] != CLIP_MAGIC {
        return Err(MagError::Dependency(format!(
            "bad clip magic in {}",
            path.display()
        )));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CLIP_VERSION {
        return Err(MagError::Checkpoint(format!("unsupported clip version {version}")));
    }
    let (t, h, w, c) = (
        u32_at(8) as usize,
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
    );
    let expect = 24 + t * h * w * c * 4;
    if bytes.len() != expect {
        return Err(MagError::Checkpoint(format!(
            "clip {} is {} bytes, expected {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let mut frames = vec![0.0f32; t * h * w * c];
    let mut off = 24;
    for ti in 0..t {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                    frames[((ti * h + y) * w + x) * c + ch] = v;
                    off += 4;
                }
            }
        }
    }
    Ok(VideoClip {
        frames,
        t,
        h,
        w,
        c,
        condition: SceneCondition::null(),
        trajectory: None,
    })
}

fn to_gray_u8(frame: &[f32], h: usize, w: usize, c: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0f32;
            for ch in 0..c {
                v += frame[(y * w + x) * c + ch];
            }
            out.push(((v / c as f32).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// One grayscale PNG per frame, named `frame_0000.png` onward.
pub fn export_png_frames(dir: &Path, clip: &VideoClip) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in 0..clip.t {
        let gray = to_gray_u8(clip.frame(t), clip.h, clip.w, clip.c);
        let file = std::fs::File::create(dir.join(format!("frame_{t:04}.png")))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), clip.w as u32, clip.h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| MagError::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(&gray)
            .map_err(|e| MagError::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}

/// Animated grayscale GIF, 10 fps.
pub fn export_gif(path: &Path, clip: &VideoClip) -> Result<()> {
    let palette: Vec<u8> = (0..=255u16).flat_map(|v| [v as u8, v as u8, v as u8]).collect();
    let file = std::fs::File::create(path)?;
    let mut enc = gif::Encoder::new(file, clip.w as u16, clip.h as u16, &palette)
        .map_err(|e| MagError::Io(std::io::Error::other(e)))?;
    enc.set_repeat(gif::Repeat::Infinite)
        .map_err(|e| MagError::Io(std::io::Error::other(e)))?;
    for t in 0..clip.t {
        let gray = to_gray_u8(clip.frame(t), clip.h, clip.w, clip.c);
        let frame = gif::Frame {
            width: clip.w as u16,
            height: clip.h as u16,
            buffer: gray.into(),
            delay: 10,
            ..gif::Frame::default()
        };
        enc.write_frame(&frame)
            .map_err(|e| MagError::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}
