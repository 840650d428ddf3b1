//! Kept/dropped token maps as grayscale PGM and SVG.

use std::fmt::Write as _;

use tnt_core::Tensor;

use crate::error::{CliError, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    /// Binary PGM (`P5`).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Channel mean of a `[C, H, W]` image, min-max scaled to 0..=255.
pub fn render_plain(image: &Tensor) -> Result<Gray> {
    let &[c, h, w] = image.shape() else {
        return Err(CliError::Data(format!(
            "expected a [C, H, W] image, got {:?}",
            image.shape()
        )));
    };
    let data = image.data();
    let gray: Vec<f64> = (0..h * w)
        .map(|p| (0..c).map(|ch| data[ch * h * w + p]).sum::<f64>() / c as f64)
        .collect();
    let lo = gray.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gray.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = gray
        .iter()
        .map(|&v| {
            if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        })
        .collect();
    Ok(Gray {
        width: w,
        height: h,
        pixels,
    })
}

fn patch_of(x: usize, y: usize, patch: usize, grid: usize) -> usize {
    (y / patch) * grid + x / patch
}

/// `plain` with every patch outside `kept` darkened to a quarter of its value.
pub fn render_keep(plain: &Gray, patch: usize, kept: &[usize]) -> Gray {
    let grid = plain.width / patch;
    let mut keep = vec![false; grid * grid];
    for &k in kept {
        if k < keep.len() {
            keep[k] = true;
        }
    }
    let mut out = plain.clone();
    for y in 0..plain.height {
        for x in 0..plain.width {
            if !keep[patch_of(x, y, patch, grid)] {
                out.pixels[y * plain.width + x] /= 4;
            }
        }
    }
    out
}

/// SVG of a rendered map; dropped patches get a hatched overlay.
pub fn to_svg(map: &Gray, patch: usize, kept: &[usize], scale: usize) -> String {
    let (w, h) = (map.width * scale, map.height * scale);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#
    );
    let _ = writeln!(
        s,
        r#"<defs><pattern id="hatch" width="4" height="4" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="4" stroke="black" stroke-width="1.5"/></pattern></defs>"#
    );
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.pixels[y * map.width + x];
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="#{v:02x}{v:02x}{v:02x}"/>"##,
                x * scale,
                y * scale
            );
        }
    }
    let grid = map.width / patch;
    for p in 0..grid * grid {
        if kept.contains(&p) {
            continue;
        }
        let (px, py) = ((p % grid) * patch * scale, (p / grid) * patch * scale);
        let side = patch * scale;
        let _ = writeln!(
            s,
            r#"<rect x="{px}" y="{py}" width="{side}" height="{side}" fill="url(#hatch)" opacity="0.6"/>"#
        );
    }
    s.push_str("</svg>\n");
    s
}
