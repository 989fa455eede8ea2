use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::features::Raster;
use crate::mask::BinaryMask;

/// Which augmentations the reference detector may draw from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSet {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    /// Standard deviation of additive per-channel Gaussian noise; 0 disables.
    pub noise_sigma: f64,
}

impl Default for AugmentSet {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rot90: true,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentSet {
    pub const NONE: AugmentSet = AugmentSet {
        hflip: false,
        vflip: false,
        rot90: false,
        noise_sigma: 0.0,
    };

    pub(crate) fn flags(&self) -> u8 {
        self.hflip as u8 | (self.vflip as u8) << 1 | (self.rot90 as u8) << 2
    }

    pub(crate) fn from_flags(flags: u8, noise_sigma: f64) -> Self {
        Self {
            hflip: flags & 1 != 0,
            vflip: flags & 2 != 0,
            rot90: flags & 4 != 0,
            noise_sigma,
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Transform {
        Transform {
            hflip: self.hflip && rng.random_bool(0.5),
            vflip: self.vflip && rng.random_bool(0.5),
            quarter_turns: if self.rot90 { rng.random_range(0..4) } else { 0 },
        }
    }
}

/// An element of the dihedral group acting on the pixel grid: optional
/// flips followed by clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.quarter_turns % 4 == 0
    }

    fn apply_grid<T: Copy>(&self, data: &[T], width: u32, height: u32) -> (Vec<T>, u32, u32) {
        let (mut w, mut h) = (width as usize, height as usize);
        let mut cur: Vec<T> = data.to_vec();
        if self.hflip {
            cur = (0..h * w).map(|i| cur[(i / w) * w + (w - 1 - i % w)]).collect();
        }
        if self.vflip {
            cur = (0..h * w).map(|i| cur[(h - 1 - i / w) * w + i % w]).collect();
        }
        for _ in 0..self.quarter_turns % 4 {
            // Clockwise: new (r, c) takes old (h - 1 - c, r); dims swap.
            let (nw, nh) = (h, w);
            cur = (0..nh * nw)
                .map(|i| {
                    let (r, c) = (i / nw, i % nw);
                    cur[(h - 1 - c) * w + r]
                })
                .collect();
            w = nw;
            h = nh;
        }
        (cur, w as u32, h as u32)
    }

    pub fn apply_raster(&self, raster: &Raster) -> Raster {
        if self.is_identity() {
            return raster.clone();
        }
        let (px, w, h) = self.apply_grid(raster.pixels(), raster.width(), raster.height());
        Raster::new(w, h, px)
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        if self.is_identity() {
            return mask.clone();
        }
        let (bits, w, h) = self.apply_grid(mask.bits(), mask.width(), mask.height());
        BinaryMask::from_bits(h, w, bits).expect("transform preserves size")
    }
}

/// Adds clamped Gaussian noise to every channel.
pub fn add_noise(raster: &mut Raster, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for p in raster.pixels_mut() {
        for c in p.iter_mut() {
            *c = (*c + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(w: u32, h: u32) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| (r * w + c) % 3 == 0)
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let m = numbered(5, 3);
        let t = Transform {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut cur = m.clone();
        for _ in 0..4 {
            cur = t.apply_mask(&cur);
        }
        assert_eq!(cur, m);
        let once = t.apply_mask(&m);
        assert_eq!((once.width(), once.height()), (3, 5));
        // Clockwise: top-left moves to top-right.
        assert_eq!(once.get(0, 2), m.get(0, 0));
    }

    #[test]
    fn flips_are_involutions() {
        let m = numbered(4, 4);
        for t in [
            Transform {
                hflip: true,
                ..Default::default()
            },
            Transform {
                vflip: true,
                ..Default::default()
            },
        ] {
            assert_eq!(t.apply_mask(&t.apply_mask(&m)), m);
        }
        let h = Transform {
            hflip: true,
            ..Default::default()
        }
        .apply_mask(&m);
        assert_eq!(h.get(0, 3), m.get(0, 0));
    }
}
