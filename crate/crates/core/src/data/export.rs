use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const GRID_GAP: usize = 2;

/// 8-bit tiled image: `height x width x channels`, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn to_byte(p: f32) -> u8 {
    ((p.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tile `[n, c, h, w]` images row-major into `cols` columns with black
/// separators.
pub fn tile(images: &Tensor<f32>, cols: usize) -> Result<Grid> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("grid input must be [n, c, h, w], got {s:?}")));
    }
    if cols == 0 {
        return Err(Error::Contract("grid needs at least one column".into()));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("grid images need 1 or 3 channels, got {c}")));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1) * GRID_GAP;
    let height = rows * h + (rows - 1) * GRID_GAP;
    let mut pixels = vec![0u8; width * height * c];
    let data = images.data();
    for i in 0..n {
        let oy = (i / cols) * (h + GRID_GAP);
        let ox = (i % cols) * (w + GRID_GAP);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = data[((i * c + ch) * h + y) * w + x];
                    pixels[((oy + y) * width + ox + x) * c + ch] = to_byte(v);
                }
            }
        }
    }
    Ok(Grid {
        width,
        height,
        channels: c,
        pixels,
    })
}

fn write_png(grid: &Grid, out: impl Write) -> std::result::Result<(), png::EncodingError> {
    let mut enc = png::Encoder::new(out, grid.width as u32, grid.height as u32);
    enc.set_color(if grid.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&grid.pixels)?;
    w.finish()
}

fn write_pnm(grid: &Grid, mut out: impl Write) -> std::io::Result<()> {
    let tag = if grid.channels == 1 { "P5" } else { "P6" };
    write!(out, "{tag}\n{} {}\n255\n", grid.width, grid.height)?;
    out.write_all(&grid.pixels)?;
    out.flush()
}

/// Write a tiled grid. `.pgm`/`.ppm` paths get a binary netpbm file,
/// anything else PNG.
pub fn export_grid(images: &Tensor<f32>, cols: usize, path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let grid = tile(images, cols)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext.eq_ignore_ascii_case("pgm") || ext.eq_ignore_ascii_case("ppm") {
        write_pnm(&grid, out).map_err(|e| Error::io(path, e))?;
    } else {
        write_png(&grid, out).map_err(|e| match e {
            png::EncodingError::IoError(e) => Error::io(path, e),
            other => Error::Contract(format!("png encoding: {other}")),
        })?;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image_keeps_dims() {
        let g = tile(&Tensor::zeros(&[1, 1, 5, 7]).unwrap(), 1).unwrap();
        assert_eq!((g.width, g.height), (7, 5));
    }

    #[test]
    fn two_by_two_has_separators() {
        let g = tile(&Tensor::filled(&[4, 1, 16, 16], 1.0).unwrap(), 2).unwrap();
        assert_eq!((g.width, g.height), (34, 34));
        assert_eq!(g.pixels[16], 0);
        assert_eq!(g.pixels[18], 255);
    }

    #[test]
    fn affine_byte_map() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128);
    }

    #[test]
    fn writes_png_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = Tensor::filled(&[3, 1, 4, 4], 0.5).unwrap();
        export_grid(&imgs, 2, dir.path().join("g.png")).unwrap();
        export_grid(&imgs, 2, dir.path().join("g.pgm")).unwrap();
        let png = std::fs::read(dir.path().join("g.png")).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        let pgm = std::fs::read(dir.path().join("g.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n10 10\n255\n"));
        assert_eq!(pgm.len(), 13 + 100);
    }
}
