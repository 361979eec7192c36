//! Plain-text PGM (P2) export of masks, one pixel per patch.

use std::path::Path;

use super::{BinaryMask, PatchGrid};
use crate::error::{Error, Result};

const MASKED: u16 = 255;

/// Renders `mask` as a P2 image: 0 = visible, 255 = masked, row-major.
pub fn mask_to_pgm(mask: &BinaryMask, grid: &PatchGrid) -> Result<String> {
    if mask.len() != grid.len() {
        return Err(Error::dim("mask_to_pgm", &[grid.len()], &[mask.len()]));
    }
    let mut out = format!("P2\n{} {}\n{}\n", grid.cols, grid.rows, MASKED);
    for r in 0..grid.rows {
        let row: Vec<&str> = (0..grid.cols)
            .map(|c| if mask.is_masked(r * grid.cols + c) { "255" } else { "0" })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_mask_pgm(path: &Path, mask: &BinaryMask, grid: &PatchGrid) -> Result<()> {
    let text = mask_to_pgm(mask, grid)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "PGM",
        detail: detail.into(),
    }
}

/// Parses an ASCII P2 image. `#` comments are skipped.
pub fn parse_pgm(text: &str) -> Result<PgmImage> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(format_err("missing P2 magic"));
    }
    let mut header = |name: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| format_err(format!("missing {name}")))?
            .parse::<usize>()
            .map_err(|e| format_err(format!("bad {name}: {e}")))
    };
    let width = header("width")?;
    let height = header("height")?;
    let maxval = header("maxval")?;
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(format_err(format!("maxval {maxval} out of range")));
    }
    let pixels = tokens
        .map(|t| t.parse::<u16>().map_err(|e| format_err(format!("bad pixel {t:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if pixels.len() != width * height {
        return Err(format_err(format!(
            "expected {} pixels, found {}",
            width * height,
            pixels.len()
        )));
    }
    if let Some(p) = pixels.iter().find(|&&p| p as usize > maxval) {
        return Err(format_err(format!("pixel {p} exceeds maxval {maxval}")));
    }
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

/// Reads a mask PGM back. Any nonzero pixel counts as masked; the ratio is
/// recovered from the popcount.
pub fn mask_from_pgm(text: &str) -> Result<(usize, usize, BinaryMask)> {
    let img = parse_pgm(text)?;
    let bits: Vec<bool> = img.pixels.iter().map(|&p| p != 0).collect();
    let ratio = bits.iter().filter(|&&b| b).count() as f64 / bits.len().max(1) as f64;
    Ok((img.height, img.width, BinaryMask::new(bits, ratio)?))
}
