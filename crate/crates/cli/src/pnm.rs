//! Binary PGM (P5) and PPM (P6) writers and the two report renderings.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Result};

pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Gray {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

impl Rgb {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

pub fn write_pgm(path: &Path, img: &Gray) -> Result<()> {
    fs::write(path, img.to_bytes())?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &Rgb) -> Result<()> {
    fs::write(path, img.to_bytes())?;
    Ok(())
}

/// Background black, necrosis red, edema green, non-enhancing blue,
/// enhancing yellow.
pub const LABEL_COLORS: [[u8; 3]; 5] = [[0, 0, 0], [220, 40, 40], [60, 200, 60], [60, 90, 230], [250, 220, 40]];

/// Black curve on white, min loss at the bottom; iterations spread across
/// the width with consecutive points joined by vertical runs.
pub fn loss_curve(losses: &[f64], width: usize, height: usize) -> Result<Gray> {
    ensure!(!losses.is_empty(), "loss history is empty");
    ensure!(losses.iter().all(|l| l.is_finite()), "loss history contains non-finite values");
    // Mean loss over the iterations falling into each column.
    let columns: Vec<f64> = (0..width)
        .map(|x| {
            let a = x * losses.len() / width;
            let b = ((x + 1) * losses.len() / width).max(a + 1).min(losses.len());
            losses[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect();
    let lo = columns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = columns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = vec![255u8; width * height];
    let mut prev: Option<usize> = None;
    for (x, &l) in columns.iter().enumerate() {
        let y = (((hi - l) / span) * (height - 1) as f64).round() as usize;
        let (y0, y1) = prev.map_or((y, y), |p| (p.min(y), p.max(y)));
        for yy in y0..=y1 {
            pixels[yy * width + x] = 0;
        }
        prev = Some(y);
    }
    Ok(Gray { width, height, pixels })
}

/// Image channel in gray, then ground truth and prediction in label colors,
/// side by side with a 2-pixel white gutter.
pub fn comparison(channel: &[f32], truth: &[u8], predicted: &[u8], width: usize, height: usize) -> Result<Rgb> {
    let n = width * height;
    ensure!(channel.len() == n && truth.len() == n && predicted.len() == n, "panel sizes differ");
    const GUTTER: usize = 2;
    let total = 3 * width + 2 * GUTTER;
    let mut pixels = vec![[255u8; 3]; total * height];
    let lo = channel.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = channel.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let g = (((channel[i] - lo) / span) * 255.0).round() as u8;
            let row = y * total;
            pixels[row + x] = [g; 3];
            pixels[row + width + GUTTER + x] = LABEL_COLORS[truth[i].min(4) as usize];
            pixels[row + 2 * (width + GUTTER) + x] = LABEL_COLORS[predicted[i].min(4) as usize];
        }
    }
    Ok(Rgb { width: total, height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers() {
        let g = Gray { width: 3, height: 2, pixels: vec![0, 1, 2, 3, 4, 5] };
        let b = g.to_bytes();
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&b[b.len() - 6..], &[0, 1, 2, 3, 4, 5]);
        let c = Rgb { width: 1, height: 1, pixels: vec![[7, 8, 9]] };
        assert_eq!(c.to_bytes(), b"P6\n1 1\n255\n\x07\x08\x09");
    }

    #[test]
    fn decreasing_curve_ends_low() {
        let losses: Vec<f64> = (0..100).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let img = loss_curve(&losses, 50, 20).unwrap();
        assert_eq!(img.pixels[0], 0, "first column starts at the top");
        assert_eq!(img.pixels[19 * 50 + 49], 0, "last column ends at the bottom");
        for x in 0..50 {
            assert!((0..20).any(|y| img.pixels[y * 50 + x] == 0), "column {x} has no curve");
        }
        assert!(loss_curve(&[], 10, 10).is_err());
    }

    #[test]
    fn comparison_layout() {
        let img = comparison(&[0.0, 1.0], &[0, 4], &[2, 4], 2, 1).unwrap();
        assert_eq!(img.width, 10);
        assert_eq!(img.pixels[0], [0; 3]);
        assert_eq!(img.pixels[1], [255; 3]);
        assert_eq!(img.pixels[4], LABEL_COLORS[0]);
        assert_eq!(img.pixels[5], LABEL_COLORS[4]);
        assert_eq!(img.pixels[8], LABEL_COLORS[2]);
    }
}
