use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mask::BinaryMask;

pub const HARMONICS: usize = 8;
/// Upper bound on the summed harmonic amplitudes, relative to the radius.
pub const MAX_DEFORMATION: f64 = 0.3;

/// An ellipse whose boundary radius is modulated by a truncated Fourier
/// series: `r(phi) = 1 + sum_k a_k cos(k phi + p_k)` with `sum_k |a_k| <= 0.3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub amplitudes: [f64; HARMONICS],
    pub phases: [f64; HARMONICS],
}

impl Blob {
    /// Random shape with semi-axes in `radius` centred at `(cx, cy)`.
    pub fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, radius: (f64, f64)) -> Self {
        let rx = rng.random_range(radius.0..=radius.1);
        let ry = rx * rng.random_range(0.7..=1.0);
        let mut amplitudes = [0.0; HARMONICS];
        let mut phases = [0.0; HARMONICS];
        for k in 0..HARMONICS {
            // Higher harmonics get less weight so outlines stay plausible.
            amplitudes[k] = rng.random_range(0.0..1.0) / (k as f64 + 1.0);
            phases[k] = rng.random_range(0.0..TAU);
        }
        let total: f64 = amplitudes.iter().sum();
        let budget = rng.random_range(0.05..=MAX_DEFORMATION);
        if total > 0.0 {
            for a in &mut amplitudes {
                *a *= budget / total;
            }
        }
        Self {
            cx,
            cy,
            rx,
            ry,
            angle: rng.random_range(0.0..TAU),
            amplitudes,
            phases,
        }
    }

    pub fn with_centre(&self, cx: f64, cy: f64) -> Self {
        Self { cx, cy, ..self.clone() }
    }

    /// Largest distance from the centre to the outline.
    pub fn extent(&self) -> f64 {
        self.rx.max(self.ry) * (1.0 + self.amplitudes.iter().sum::<f64>())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let r: f64 = 1.0
            + (0..HARMONICS)
                .map(|k| self.amplitudes[k] * ((k as f64 + 1.0) * phi + self.phases[k]).cos())
                .sum::<f64>();
        rho <= r
    }

    /// Rasterizes at pixel centres.
    pub fn rasterize(&self, height: u32, width: u32) -> BinaryMask {
        let e = self.extent().ceil() + 1.0;
        let r0 = ((self.cy - e).floor().max(0.0)) as u32;
        let r1 = ((self.cy + e).ceil().min(height as f64)) as u32;
        let c0 = ((self.cx - e).floor().max(0.0)) as u32;
        let c1 = ((self.cx + e).ceil().min(width as f64)) as u32;
        let mut mask = BinaryMask::new(height, width);
        for row in r0..r1 {
            for col in c0..c1 {
                if self.contains(col as f64 + 0.5, row as f64 + 0.5) {
                    mask.set(row, col, true);
                }
            }
        }
        mask
    }
}

/// Pixels within Chebyshev distance `radius` of the mask.
pub fn dilate(mask: &BinaryMask, radius: u32) -> BinaryMask {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let r = radius as i64;
    let mut out = BinaryMask::new(mask.height(), mask.width());
    for row in 0..h {
        for col in 0..w {
            if !mask.get(row as u32, col as u32) {
                continue;
            }
            for nr in (row - r).max(0)..=(row + r).min(h - 1) {
                for nc in (col - r).max(0)..=(col + r).min(w - 1) {
                    out.set(nr as u32, nc as u32, true);
                }
            }
        }
    }
    out
}

pub fn overlaps(a: &BinaryMask, b: &BinaryMask) -> bool {
    a.bits().iter().zip(b.bits()).any(|(&x, &y)| x && y)
}

/// True when some pixel of `a` lies within Chebyshev distance `d` of `b`.
pub fn within(a: &BinaryMask, b: &BinaryMask, d: u32) -> bool {
    match (a.bbox(), b.bbox()) {
        (Some(ba), Some(bb)) => {
            let grow = |v: u32| v.saturating_sub(d);
            let ax = (grow(ba.x), ba.x + ba.w + d);
            let ay = (grow(ba.y), ba.y + ba.h + d);
            if ax.1 <= bb.x || bb.x + bb.w <= ax.0 || ay.1 <= bb.y || bb.y + bb.h <= ay.0 {
                return false;
            }
            overlaps(&dilate(a, d), b)
        }
        _ => false,
    }
}
