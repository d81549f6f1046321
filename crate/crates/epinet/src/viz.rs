//! Filter-grid rendering: tile a bank of epitomes (or filters) into one RGB
//! image with 1-pixel black separators and write it as binary PPM (P6).

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct FilterGrid {
    pub width: usize,
    pub height: usize,
    /// RGB, row-major, 3 bytes per pixel.
    pub pixels: Vec<u8>,
}

/// Grid layout for `count` tiles: columns is the smallest divisor of `count`
/// at least ceil(sqrt(count)), so the grid is as square as divisibility
/// allows (96 -> 12 x 8).
pub fn grid_dims(count: usize) -> (usize, usize) {
    assert!(count > 0);
    let mut cols = (count as f64).sqrt().ceil() as usize;
    while count % cols != 0 {
        cols += 1;
    }
    (cols, count / cols)
}

/// Render `count` tiles of `side x side` pixels with `channels` in {1, 3}
/// from weights laid out `[tile][channel][y][x]`. Each tile is min-max
/// normalized independently; grayscale tiles are replicated to gray RGB.
pub fn render_filter_grid<F: Scalar>(
    weights: &[F],
    count: usize,
    channels: usize,
    side: usize,
) -> Result<FilterGrid> {
    if channels != 1 && channels != 3 {
        return Err(Error::dim(
            "render_filter_grid",
            format!("can only render 1- or 3-channel tiles, got {channels}"),
        ));
    }
    let tile_len = channels * side * side;
    if weights.len() != count * tile_len {
        return Err(Error::dim(
            "render_filter_grid",
            format!(
                "expected {} weights for {count} tiles, got {}",
                count * tile_len,
                weights.len()
            ),
        ));
    }
    let (cols, rows) = grid_dims(count);
    let cell = side + 1;
    let width = cols * cell + 1;
    let height = rows * cell + 1;
    // Black background doubles as the separator lines.
    let mut pixels = vec![0u8; width * height * 3];
    for k in 0..count {
        let tile = &weights[k * tile_len..(k + 1) * tile_len];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in tile {
            let v = Scalar::to_f64(v);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        let oy = (k / cols) * cell + 1;
        let ox = (k % cols) * cell + 1;
        for y in 0..side {
            for x in 0..side {
                let p = ((oy + y) * width + ox + x) * 3;
                for c in 0..3 {
                    let src = if channels == 1 { 0 } else { c };
                    let v = Scalar::to_f64(tile[(src * side + y) * side + x]);
                    let byte = if span > 0.0 {
                        ((v - lo) / span * 255.0).round() as u8
                    } else {
                        128
                    };
                    pixels[p + c] = byte;
                }
            }
        }
    }
    Ok(FilterGrid {
        width,
        height,
        pixels,
    })
}

/// Binary PPM (P6), 8 bits per sample.
pub fn write_ppm(grid: &FilterGrid, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", grid.width, grid.height)?;
    f.write_all(&grid.pixels)?;
    Ok(())
}
