//! Qualitative overlay plots: raster background, ground-truth future,
//! predicted modes, and goal candidates per sample.

use bevforecast::scene_sim::SceneSample;
use bevforecast::traj_decoder::{ModelInput, Prediction};
use image::{Rgb, RgbImage};

const SCALE: u32 = 6;

fn mode_color(m: usize) -> Rgb<u8> {
    const PALETTE: [[u8; 3]; 10] = [
        [230, 60, 60],
        [250, 150, 40],
        [240, 220, 60],
        [120, 220, 80],
        [60, 200, 200],
        [80, 120, 240],
        [160, 80, 240],
        [240, 100, 200],
        [150, 150, 150],
        [120, 80, 40],
    ];
    let c = PALETTE[m % PALETTE.len()];
    Rgb(c)
}

/// Converts a target-frame metric point to pixel coordinates, or None when it
/// falls outside the plotted grid.
fn to_px(
    p: (f64, f64),
    input: &ModelInput,
    sample: &SceneSample,
    w_px: u32,
    h_px: u32,
) -> Option<(i64, i64)> {
    let ego = input.ego_from_target.apply(p);
    let spec = &sample.raster.spec;
    let u = (ego.0 + spec.range_m) / (2.0 * spec.range_m);
    let v = (ego.1 + spec.range_m) / (2.0 * spec.range_m);
    let x = (u * w_px as f64).round() as i64;
    let y = (v * h_px as f64).round() as i64;
    if x < 0 || y < 0 || x >= w_px as i64 || y >= h_px as i64 {
        None
    } else {
        Some((x, y))
    }
}

fn draw_dot(img: &mut RgbImage, x: i64, y: i64, r: i64, color: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
}

fn draw_segment(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let n = (a.0 - b.0).abs().max((a.1 - b.1).abs()).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = a.0 as f64 + (b.0 - a.0) as f64 * t;
        let y = a.1 as f64 + (b.1 - a.1) as f64 * t;
        draw_dot(img, x.round() as i64, y.round() as i64, 0, color);
    }
}

fn draw_polyline(img: &mut RgbImage, pts: &[Option<(i64, i64)>], color: Rgb<u8>) {
    for w in pts.windows(2) {
        if let (Some(a), Some(b)) = (w[0], w[1]) {
            draw_segment(img, a, b, color);
        }
    }
}

pub fn render_overlay(sample: &SceneSample, pred: &Prediction, input: &ModelInput) -> RgbImage {
    let ch = &sample.raster.channels;
    let (h, w) = (ch.shape()[1], ch.shape()[2]);
    let (w_px, h_px) = (w as u32 * SCALE, h as u32 * SCALE);
    let mut img = RgbImage::new(w_px, h_px);

    // background from the raster: drivable gray, obstacles dark, agents blue
    for py in 0..h_px {
        for px in 0..w_px {
            let i = (py / SCALE) as usize;
            let j = (px / SCALE) as usize;
            let drivable = ch[[0, i, j]];
            let marking = ch[[1, i, j]];
            let obstacle = ch[[3, i, j]];
            let agents = ch[[4, i, j]];
            let base = 30.0 + 70.0 * drivable + 60.0 * marking;
            let mut c = [base as u8, base as u8, base as u8];
            if obstacle > 0.5 {
                c = [90, 40, 40];
            }
            if agents > 0.5 {
                c = [60, 90, 160];
            }
            img.put_pixel(px, py, Rgb(c));
        }
    }

    // ground-truth future in green
    let t_fut = input.future.shape()[1];
    let gt: Vec<Option<(i64, i64)>> = (0..t_fut)
        .filter(|&s| input.future_valid[[0, s]])
        .map(|s| to_px((input.future[[0, s, 0]], input.future[[0, s, 1]]), input, sample, w_px, h_px))
        .collect();
    draw_polyline(&mut img, &gt, Rgb([40, 230, 40]));

    // final-layer predicted modes
    if let Some(hyp) = pred.layers.last() {
        let g = hyp.gmm.data();
        let k = g.shape()[0];
        for m in 0..k {
            let pts: Vec<Option<(i64, i64)>> = (0..t_fut)
                .map(|s| to_px((g[[m, s, 0]], g[[m, s, 1]]), input, sample, w_px, h_px))
                .collect();
            draw_polyline(&mut img, &pts, mode_color(m));
        }
    }

    // goal candidates as yellow dots
    let goals = pred.goals.goals.data();
    for m in 0..goals.shape()[0] {
        if let Some((x, y)) = to_px((goals[[m, 0]], goals[[m, 1]]), input, sample, w_px, h_px) {
            draw_dot(&mut img, x, y, 2, Rgb([255, 240, 80]));
        }
    }

    // target's current position marker
    if let Some((x, y)) = to_px((0.0, 0.0), input, sample, w_px, h_px) {
        draw_dot(&mut img, x, y, 3, Rgb([255, 255, 255]));
    }
    img
}
