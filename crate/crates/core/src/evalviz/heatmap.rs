use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::AttentionMap;

/// Nearest-neighbour upscale factor of the color pixmap.
pub const HEATMAP_SCALE: usize = 32;
/// Target-cell outline color.
pub const OUTLINE: [u8; 3] = [255, 0, 0];
const OUTLINE_PX: usize = 2;

fn normalised(alpha: &AttentionMap, max_val: f64) -> Vec<f64> {
    let data = alpha.weights().data();
    let max = data.iter().cloned().fold(0.0, f64::max);
    data.iter()
        .map(|&a| if max > 0.0 { (max_val * a / max).round() } else { 0.0 })
        .collect()
}

/// Binary 16-bit graymap, one pixel per cell, `round(65535·α/max α)`.
pub fn pgm16_bytes(alpha: &AttentionMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", alpha.w(), alpha.h()).into_bytes();
    for v in normalised(alpha, 65535.0) {
        out.extend_from_slice(&(v as u16).to_be_bytes());
    }
    out
}

/// Binary pixmap upscaled ×[`HEATMAP_SCALE`] with grey intensity
/// `round(255·α/max α)` and target cells outlined in [`OUTLINE`].
pub fn ppm_bytes(alpha: &AttentionMap, target_cells: &[(usize, usize)]) -> Vec<u8> {
    let (h, w, s) = (alpha.h(), alpha.w(), HEATMAP_SCALE);
    let grey = normalised(alpha, 255.0);
    let mut out = format!("P6\n{} {}\n255\n", w * s, h * s).into_bytes();
    let edge = |k: usize| k < OUTLINE_PX || k >= s - OUTLINE_PX;
    for y in 0..h * s {
        for x in 0..w * s {
            let (r, c) = (y / s, x / s);
            let on_outline = target_cells.contains(&(r, c)) && (edge(y % s) || edge(x % s));
            if on_outline {
                out.extend_from_slice(&OUTLINE);
            } else {
                let v = grey[r * w + c] as u8;
                out.extend_from_slice(&[v, v, v]);
            }
        }
    }
    out
}

/// Writes `<stem>.pgm` and `<stem>.ppm`.
pub fn export_heatmap(alpha: &AttentionMap, target_cells: &[(usize, usize)], stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if let Some(&(r, c)) = target_cells.iter().find(|&&(r, c)| r >= alpha.h() || c >= alpha.w()) {
        return Err(Error::Input(format!("target cell ({r}, {c}) outside {}×{} map", alpha.h(), alpha.w())));
    }
    let pgm = stem.with_extension("pgm");
    let ppm = stem.with_extension("ppm");
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&pgm, pgm16_bytes(alpha)).map_err(|e| Error::io(&pgm, e))?;
    std::fs::write(&ppm, ppm_bytes(alpha, target_cells)).map_err(|e| Error::io(&ppm, e))?;
    Ok((pgm, ppm))
}

/// Splits off `n` whitespace-separated header fields, skipping comments.
fn header(bytes: &[u8], n: usize) -> Result<(Vec<String>, &[u8])> {
    let bad = |why: &str| Error::format("<pgm>", why.to_string());
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("header ends early"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= bytes.len() {
        return Err(bad("missing raster"));
    }
    Ok((fields, &bytes[i + 1..]))
}

/// Parses a binary 16-bit graymap into `(width, height, pixels)`.
pub fn parse_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let bad = |why: String| Error::format("<pgm>", why);
    let (f, raster) = header(bytes, 4)?;
    if f[0] != "P5" {
        return Err(bad(format!("magic {:?} is not P5", f[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad header number {s:?}")));
    let (w, h, max) = (num(&f[1])?, num(&f[2])?, num(&f[3])?);
    if max != 65535 {
        return Err(bad(format!("max value {max}, expected 65535")));
    }
    if raster.len() != w * h * 2 {
        return Err(bad(format!("raster has {} bytes, expected {}", raster.len(), w * h * 2)));
    }
    let pixels = raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok((w, h, pixels))
}

#[cfg(test)]
pub(super) fn parse_ppm(bytes: &[u8]) -> (usize, usize, Vec<[u8; 3]>) {
    let (f, raster) = header(bytes, 4).unwrap();
    assert_eq!(f[0], "P6");
    let (w, h): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
    assert_eq!(raster.len(), w * h * 3);
    (w, h, raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}
