//! CT-style intensity normalization and the deterministic synthetic dataset
//! (a desk-scale stand-in for real CT slices: smooth noise background plus
//! blob-like elliptical targets).

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::bilinear_up2x_raw;
use crate::tensor::Tensor;

/// One image/mask pair. Image values are already on the normalized scale;
/// the mask is binary.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

/// Divide every value by 1024 (the approximate maximum absolute CT value).
/// No clipping; negative values pass through scaled.
pub fn normalize(raw: &Tensor) -> Tensor {
    let data = raw.data().iter().map(|v| v / 1024.0).collect();
    Tensor::from_vec(raw.shape().to_vec(), data).expect("shape unchanged")
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn max_radius(&self) -> f64 {
        self.rx.max(self.ry)
    }
}

const FG_MIN: f64 = 0.01;
const FG_MAX: f64 = 0.40;

/// Deterministic dataset: per sample, a smooth background in [−0.3, 0.3]
/// plus 1–3 non-overlapping filled ellipses of intensity 0.5±0.2; the mask
/// is the union of the ellipse interiors, with foreground fraction in
/// [1%, 40%] by construction.
pub fn synth_dataset(seed: u64, count: usize, height: usize, width: usize) -> Result<Vec<Sample>> {
    if height != width {
        return Err(Error::Config(format!(
            "synthetic images must be square, got {height}x{width}"
        )));
    }
    if !height.is_power_of_two() || height < 32 {
        return Err(Error::Config(format!(
            "synthetic image size must be a power of two ≥ 32, got {height}"
        )));
    }
    let mut r = rng::seeded(seed, rng::STREAM_DATA);
    (0..count).map(|_| gen_sample(&mut r, height)).collect()
}

fn gen_sample(r: &mut ChaCha20Rng, size: usize) -> Result<Sample> {
    let h = size as f64;
    for _attempt in 0..1000 {
        // low-res noise upsampled bilinearly stays within the amplitude bounds
        let mut bg: Vec<f64> = (0..64).map(|_| rng::uniform(r, -0.3, 0.3)).collect();
        let mut cur = 8usize;
        while cur < size {
            bg = bilinear_up2x_raw(&bg, 1, cur, cur);
            cur *= 2;
        }

        let n_ellipses = 1 + rng::index(r, 3);
        let mut ellipses: Vec<Ellipse> = Vec::with_capacity(n_ellipses);
        let mut ok = true;
        for _ in 0..n_ellipses {
            let e = Ellipse {
                cx: rng::uniform(r, 0.25 * h, 0.75 * h),
                cy: rng::uniform(r, 0.25 * h, 0.75 * h),
                rx: rng::uniform(r, h / 16.0, h / 5.0),
                ry: rng::uniform(r, h / 16.0, h / 5.0),
                intensity: 0.5 + rng::uniform(r, -0.2, 0.2),
            };
            if ellipses.iter().any(|other| {
                let d = ((e.cx - other.cx).powi(2) + (e.cy - other.cy).powi(2)).sqrt();
                d <= e.max_radius() + other.max_radius()
            }) {
                ok = false;
                break;
            }
            ellipses.push(e);
        }
        if !ok {
            continue;
        }

        let mut image = bg;
        let mut mask = vec![0.0f64; size * size];
        let mut fg = 0usize;
        for i in 0..size {
            let y = i as f64 + 0.5;
            for j in 0..size {
                let x = j as f64 + 0.5;
                for e in &ellipses {
                    if e.contains(x, y) {
                        image[i * size + j] += e.intensity;
                        mask[i * size + j] = 1.0;
                        fg += 1;
                        break;
                    }
                }
            }
        }
        let fraction = fg as f64 / (size * size) as f64;
        if !(FG_MIN..=FG_MAX).contains(&fraction) {
            continue;
        }
        return Ok(Sample {
            image: Tensor::from_vec(vec![1, size, size], image)?,
            mask: Tensor::from_vec(vec![1, size, size], mask)?,
        });
    }
    Err(Error::Contract(
        "synthetic sample generation failed to satisfy constraints".into(),
    ))
}
