use image::RgbImage;

pub const FEATURE_DIM: usize = 5;

/// Per-pixel feature: `(r, g, b, local mean intensity, local intensity std)`.
pub type PixelFeature = [f64; FEATURE_DIM];

/// Floating-point RGB image with channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: u32,
    height: u32,
    pixels: Vec<[f64; 3]>,
}

impl Raster {
    pub fn new(width: u32, height: u32, pixels: Vec<[f64; 3]>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize, "pixel count mismatch");
        Self { width, height, pixels }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        Self::new(width, height, vec![rgb; width as usize * height as usize])
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let pixels = img
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Self::new(img.width(), img.height(), pixels)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let p = self.get(y, x);
            image::Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> [f64; 3] {
        self.pixels[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, rgb: [f64; 3]) {
        self.pixels[row as usize * self.width as usize + col as usize] = rgb;
    }
}

/// Per-pixel features for a whole image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: u32,
    pub height: u32,
    pub features: Vec<PixelFeature>,
}

impl FeatureGrid {
    #[inline]
    pub fn get(&self, row: u32, col: u32) -> &PixelFeature {
        &self.features[row as usize * self.width as usize + col as usize]
    }
}

/// Computes colour and 3x3 intensity statistics, replicating edge pixels.
pub fn extract_features(raster: &Raster) -> FeatureGrid {
    let (w, h) = (raster.width as usize, raster.height as usize);
    let intensity: Vec<f64> = raster.pixels.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let mut features = Vec::with_capacity(w * h);
    for row in 0..h {
        let rows = [row.saturating_sub(1), row, (row + 1).min(h - 1)];
        for col in 0..w {
            let cols = [col.saturating_sub(1), col, (col + 1).min(w - 1)];
            let mut window = [0.0; 9];
            let mut k = 0;
            for &r in &rows {
                for &c in &cols {
                    window[k] = intensity[r * w + c];
                    k += 1;
                }
            }
            let mean = window.iter().sum::<f64>() / 9.0;
            let var = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
            let [r, g, b] = raster.pixels[row * w + col];
            features.push([r, g, b, mean, var.sqrt()]);
        }
    }
    FeatureGrid {
        width: raster.width,
        height: raster.height,
        features,
    }
}
