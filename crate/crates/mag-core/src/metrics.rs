//! Reconstruction metrics on [0,1] images: MSE, PSNR (capped at 99 dB for
//! exact matches), and SSIM with a 7x7 uniform window, C1=(0.01)^2,
//! C2=(0.03)^2.

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// PSNR from an MSE on unit-range data.
pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    psnr_from_mse(mse(a, b))
}

/// SSIM over all valid 7x7 window positions of a single-channel image;
/// multi-channel inputs are averaged per channel.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, c: usize) -> f64 {
    assert_eq!(a.len(), h * w * c);
    assert_eq!(b.len(), h * w * c);
    let win = SSIM_WINDOW;
    if h < win || w < win {
        // Degenerate frames: fall back to one global window.
        return ssim_window(a, b, a.len());
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut pa = vec![0.0f32; win * win];
    let mut pb = vec![0.0f32; win * win];
    for ch in 0..c {
        for y0 in 0..=(h - win) {
            for x0 in 0..=(w - win) {
                let mut i = 0;
                for dy in 0..win {
                    for dx in 0..win {
                        let idx = ((y0 + dy) * w + (x0 + dx)) * c + ch;
                        pa[i] = a[idx];
                        pb[i] = b[idx];
                        i += 1;
                    }
                }
                total += ssim_window(&pa, &pb, win * win);
                count += 1;
            }
        }
    }
    total / count as f64
}

fn ssim_window(a: &[f32], b: &[f32], n: usize) -> f64 {
    let nf = n as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] as f64, b[i] as f64);
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let (ma, mb) = (sa / nf, sb / nf);
    let va = saa / nf - ma * ma;
    let vb = sbb / nf - mb * mb;
    let cov = sab / nf - ma * mb;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}
