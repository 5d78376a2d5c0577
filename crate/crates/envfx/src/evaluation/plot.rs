//! Side-by-side spectrogram comparison figures.
//!
//! Renders two panels (converted | ground truth) as color-mapped log-mel
//! heatmaps with the pitch contour in red and the energy contour in purple,
//! labeled with an embedded 5x7 pixel font. Rendering is pure integer/f64
//! arithmetic with no system fonts, so output images are bit-reproducible.

mod font;

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::features::{log_floor, MelSpectrogram, N_MELS, PITCH_MAX_HZ, PITCH_MIN_HZ};

/// One clip's worth of plot data. Contours must be frame-aligned with the
/// (unpadded) mel.
#[derive(Debug, Clone)]
pub struct PlotClip {
    pub mel: MelSpectrogram,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub label: String,
}

impl PlotClip {
    fn validate(&self) -> Result<()> {
        let t = self.mel.valid_len();
        if self.pitch.len() != t || self.energy.len() != t {
            return Err(Error::Evaluation(format!(
                "contour lengths ({}, {}) do not match the {} mel frames",
                self.pitch.len(),
                self.energy.len(),
                t
            )));
        }
        Ok(())
    }
}

const CELL_H: u32 = 2; // vertical pixels per mel bin
const MARGIN_LEFT: u32 = 34;
const MARGIN_RIGHT: u32 = 10;
const MARGIN_TOP: u32 = 14;
const MARGIN_BOTTOM: u32 = 24;
const PANEL_GAP: u32 = 18;

/// Render the two-panel comparison image in memory.
pub fn render_comparison(converted: &PlotClip, truth: &PlotClip) -> Result<RgbImage> {
    converted.validate()?;
    truth.validate()?;
    if converted.mel.valid_len() != truth.mel.valid_len() {
        return Err(Error::Evaluation(format!(
            "clips must be frame-aligned: {} vs {} frames",
            converted.mel.valid_len(),
            truth.mel.valid_len()
        )));
    }

    let t = converted.mel.valid_len() as u32;
    let panel_w = t.max(40);
    let panel_h = N_MELS as u32 * CELL_H;
    let width = MARGIN_LEFT + panel_w + PANEL_GAP + panel_w + MARGIN_RIGHT;
    let height = MARGIN_TOP + panel_h + MARGIN_BOTTOM;

    let mut img = RgbImage::from_pixel(width, height, Rgb([248, 248, 248]));
    draw_panel(&mut img, converted, MARGIN_LEFT, MARGIN_TOP, panel_w, panel_h)?;
    draw_panel(
        &mut img,
        truth,
        MARGIN_LEFT + panel_w + PANEL_GAP,
        MARGIN_TOP,
        panel_w,
        panel_h,
    )?;

    // Titles and axis labels.
    font::draw_text(
        &mut img,
        &converted.label.to_ascii_uppercase(),
        MARGIN_LEFT,
        3,
        Rgb([20, 20, 20]),
    );
    font::draw_text(
        &mut img,
        &truth.label.to_ascii_uppercase(),
        MARGIN_LEFT + panel_w + PANEL_GAP,
        3,
        Rgb([20, 20, 20]),
    );
    font::draw_text(
        &mut img,
        "FRAME",
        MARGIN_LEFT + panel_w.saturating_sub(15),
        MARGIN_TOP + panel_h + 10,
        Rgb([20, 20, 20]),
    );
    font::draw_text_vertical(&mut img, "MEL", 3, MARGIN_TOP + panel_h / 2 - 12, Rgb([20, 20, 20]));
    // Mel-axis ticks (bin 0 at the bottom).
    font::draw_text(&mut img, "80", 14, MARGIN_TOP.saturating_sub(3) + 2, Rgb([90, 90, 90]));
    font::draw_text(&mut img, "0", 20, MARGIN_TOP + panel_h - 6, Rgb([90, 90, 90]));
    // Legend.
    font::draw_text(&mut img, "PITCH", MARGIN_LEFT, MARGIN_TOP + panel_h + 10, Rgb([200, 30, 30]));
    font::draw_text(
        &mut img,
        "ENERGY",
        MARGIN_LEFT + 40,
        MARGIN_TOP + panel_h + 10,
        Rgb([140, 40, 170]),
    );
    Ok(img)
}

fn draw_panel(
    img: &mut RgbImage,
    clip: &PlotClip,
    x0: u32,
    y0: u32,
    panel_w: u32,
    panel_h: u32,
) -> Result<()> {
    let t = clip.mel.valid_len();
    let frames = clip.mel.frames();

    // Color scale over this clip's dynamic range.
    let floor = log_floor();
    let max_v = frames.iter().cloned().fold(floor, f64::max);
    let range = (max_v - floor).max(1e-6);

    for px in 0..panel_w {
        let f = ((px as usize) * t / panel_w as usize).min(t - 1);
        for bin in 0..N_MELS {
            let v = (frames[[f, bin]] - floor) / range;
            let color = viridis(v);
            // Bin 0 at the bottom.
            let y_top = y0 + (N_MELS - 1 - bin) as u32 * CELL_H;
            for dy in 0..CELL_H {
                img.put_pixel(x0 + px, y_top + dy, color);
            }
        }
    }

    // Pitch contour: voiced frames only, log-Hz scale over [50, 800].
    let pitch_color = Rgb([200, 30, 30]);
    for px in 0..panel_w {
        let f = ((px as usize) * t / panel_w as usize).min(t - 1);
        let hz = clip.pitch[f];
        if hz > 0.0 {
            let frac = ((hz.ln() - PITCH_MIN_HZ.ln()) / (PITCH_MAX_HZ.ln() - PITCH_MIN_HZ.ln()))
                .clamp(0.0, 1.0);
            let y = y0 + ((1.0 - frac) * (panel_h - 2) as f64) as u32;
            img.put_pixel(x0 + px, y, pitch_color);
            img.put_pixel(x0 + px, y + 1, pitch_color);
        }
    }

    // Energy contour, normalized to the clip's own maximum.
    let e_max = clip.energy.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
    let energy_color = Rgb([140, 40, 170]);
    for px in 0..panel_w {
        let f = ((px as usize) * t / panel_w as usize).min(t - 1);
        let frac = (clip.energy[f] / e_max).clamp(0.0, 1.0);
        let y = y0 + ((1.0 - frac) * (panel_h - 2) as f64) as u32;
        img.put_pixel(x0 + px, y, energy_color);
        img.put_pixel(x0 + px, y + 1, energy_color);
    }

    // Panel frame.
    let border = Rgb([60, 60, 60]);
    for px in 0..panel_w {
        img.put_pixel(x0 + px, y0, border);
        img.put_pixel(x0 + px, y0 + panel_h - 1, border);
    }
    for py in 0..panel_h {
        img.put_pixel(x0, y0 + py, border);
        img.put_pixel(x0 + panel_w - 1, y0 + py, border);
    }
    Ok(())
}

/// Five-anchor approximation of the viridis colormap.
fn viridis(v: f64) -> Rgb<u8> {
    const ANCHORS: [(f64, [f64; 3]); 5] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    for w in ANCHORS.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if v <= t1 {
            let f = (v - t0) / (t1 - t0);
            return Rgb([
                (c0[0] + f * (c1[0] - c0[0])) as u8,
                (c0[1] + f * (c1[1] - c0[1])) as u8,
                (c0[2] + f * (c1[2] - c0[2])) as u8,
            ]);
        }
    }
    Rgb([253, 231, 37])
}

/// Render and write a PNG.
pub fn plot_comparison(converted: &PlotClip, truth: &PlotClip, path: &Path) -> Result<()> {
    let img = render_comparison(converted, truth)?;
    img.save(path)
        .map_err(|e| Error::Evaluation(format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn fixture_clip(label: &str, seed: u64) -> PlotClip {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let t = 60;
        let mel = MelSpectrogram::from_frames(Array2::from_shape_fn((t, N_MELS), |(f, b)| {
            log_floor()
                + 6.0 * (-((b as f64 - 20.0 - 10.0 * (f as f64 / 12.0).sin()).powi(2)) / 50.0).exp()
                + rng.random_range(0.0..0.3)
        }))
        .unwrap();
        let pitch = (0..t)
            .map(|f| {
                if (10..50).contains(&f) {
                    180.0 + 40.0 * (f as f64 / 6.0).sin()
                } else {
                    0.0
                }
            })
            .collect();
        let energy = (0..t).map(|f| 1.0 + (f as f64 / 9.0).cos().abs()).collect();
        PlotClip {
            mel,
            pitch,
            energy,
            label: label.into(),
        }
    }

    #[test]
    fn output_file_is_a_decodable_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cmp.png");
        plot_comparison(&fixture_clip("converted", 1), &fixture_clip("ground truth", 2), &path)
            .unwrap();
        let img = image::open(&path).unwrap();
        assert!(img.width() > 100 && img.height() > 100);
    }

    #[test]
    fn pitch_pixels_appear_only_against_voiced_frames() {
        // Render a clip voiced only in the middle; the pitch color must not
        // appear in the left quarter of the first panel.
        let clip = fixture_clip("a", 3);
        let img = render_comparison(&clip, &clip).unwrap();
        let red = Rgb([200u8, 30, 30]);
        let t = clip.mel.valid_len() as u32;
        let panel_w = t.max(40);
        let panel_h = N_MELS as u32 * CELL_H;
        for px in 0..panel_w / 6 {
            for py in MARGIN_TOP..MARGIN_TOP + panel_h {
                assert_ne!(
                    img.get_pixel(MARGIN_LEFT + px, py),
                    &red,
                    "pitch pixel in unvoiced region at x offset {px}"
                );
            }
        }
    }

    #[test]
    fn mismatched_lengths_error() {
        let a = fixture_clip("a", 1);
        let mut b = fixture_clip("b", 2);
        b.pitch.pop();
        assert!(render_comparison(&a, &b).is_err());
    }

    #[test]
    fn render_is_deterministic() {
        let a = fixture_clip("a", 5);
        let b = fixture_clip("b", 6);
        let one = render_comparison(&a, &b).unwrap();
        let two = render_comparison(&a, &b).unwrap();
        assert_eq!(one.into_raw(), two.into_raw());
    }

    /// Golden layout check. Rendering is deterministic (pure f64/integer
    /// math, embedded font), so the tolerance is exact hash equality; any
    /// intentional layout change re-freezes the constant.
    #[test]
    fn golden_fixture_pixel_hash() {
        let img = render_comparison(&fixture_clip("converted", 7), &fixture_clip("truth", 8))
            .unwrap();
        let hash = crate::model::checkpoint::fnv1a(&img.into_raw());
        assert_eq!(hash, GOLDEN_HASH, "layout changed; re-freeze if intended");
    }

    const GOLDEN_HASH: u64 = 1847559081631060833;
}
