use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw 8-bit image block from an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: offset as u64,
            msg: format!("truncated header: missing {what} ({} bytes available)", bytes.len()),
        })
}

fn expect_magic(bytes: &[u8], magic: u32) -> Result<()> {
    let got = be_u32(bytes, 0, "magic")?;
    if got != magic {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic {got:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

fn body(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Parse {
        offset: bytes.len() as u64,
        msg: format!("truncated data: need {len} bytes from offset {start}"),
    })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    expect_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            offset: 8,
            msg: format!("degenerate image size {rows}x{cols}"),
        });
    }
    let pixels = body(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    expect_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, "label count")? as usize;
    Ok(body(bytes, 8, count)?.to_vec())
}

pub fn encode_idx_images(img: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len());
    for v in [IDX_IMAGES_MAGIC, img.count as u32, img.rows as u32, img.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Bilinear resample of one `h x w` plane with half-pixel centers.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..tw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let p = |yy: usize, xx: usize| src[yy * w + xx] as f64;
            let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
            let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    out
}

fn byte_to_pixel(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

fn pixel_to_byte(p: f32) -> u8 {
    ((p.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Decode IDX image and label bytes into a dataset, optionally resampled
/// to `target x target`.
pub fn dataset_from_idx(
    name: &str,
    images: &[u8],
    labels: &[u8],
    target: Option<usize>,
) -> Result<Dataset> {
    let img = parse_idx_images(images)?;
    let lab = parse_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("{} images but {} labels", img.count, lab.len()),
        });
    }
    if img.count == 0 {
        return Err(Error::Parse {
            offset: 4,
            msg: "empty IDX file".into(),
        });
    }
    let (th, tw) = target.map_or((img.rows, img.cols), |t| (t, t));
    let plane = img.rows * img.cols;
    let mut data = Vec::with_capacity(img.count * th * tw);
    for chunk in img.pixels.chunks(plane) {
        let px: Vec<f32> = chunk.iter().map(|&b| byte_to_pixel(b)).collect();
        if (th, tw) == (img.rows, img.cols) {
            data.extend(px);
        } else {
            data.extend(
                resize_bilinear(&px, img.rows, img.cols, th, tw)
                    .into_iter()
                    .map(|v| v.clamp(-1.0, 1.0)),
            );
        }
    }
    let num_classes = lab.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let labels = lab.iter().map(|&l| l as usize).collect();
    Dataset::new(
        name,
        Tensor::new(vec![img.count, 1, th, tw], data)?,
        Some(labels),
        num_classes,
    )
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    target: Option<usize>,
) -> Result<Dataset> {
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let name = ip
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    dataset_from_idx(&name, &images, &labels, target)
}

/// Encode a grayscale labeled dataset as IDX image and label bytes.
pub fn dataset_to_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Contract(format!("IDX stores grayscale images, got {c} channels")));
    }
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Contract("IDX export needs labels".into()))?;
    if ds.num_classes() > 256 {
        return Err(Error::Contract("IDX labels are single bytes".into()));
    }
    let img = IdxImages {
        count: ds.len(),
        rows: h,
        cols: w,
        pixels: ds.images().data().iter().map(|&p| pixel_to_byte(p)).collect(),
    };
    let lab: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    Ok((encode_idx_images(&img), encode_idx_labels(&lab)))
}

pub fn write_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (img, lab) = dataset_to_idx(ds)?;
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<u8>, Vec<u8>) {
        let img = IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
        };
        (encode_idx_images(&img), encode_idx_labels(&[7, 3]))
    }

    #[test]
    fn rescales_extremes() {
        let (i, l) = sample();
        let ds = dataset_from_idx("t", &i, &l, None).unwrap();
        assert_eq!(ds.images().data()[0], -1.0);
        assert_eq!(ds.images().data()[1], 1.0);
        assert_eq!(ds.labels().unwrap(), &[7, 3]);
        assert_eq!(ds.image_shape(), [1, 2, 3]);
    }

    #[test]
    fn short_header_reports_offset() {
        let (i, _) = sample();
        match parse_idx_images(&i[..10]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let (mut i, l) = sample();
        assert!(matches!(parse_idx_labels(&i), Err(Error::Parse { offset: 0, .. })));
        let short_labels = encode_idx_labels(&[1]);
        assert!(dataset_from_idx("t", &i, &short_labels, None).is_err());
        i.truncate(20);
        assert!(dataset_from_idx("t", &i, &l, None).is_err());
    }

    #[test]
    fn round_trip_bytes() {
        let (i, l) = sample();
        let ds = dataset_from_idx("t", &i, &l, None).unwrap();
        let (i2, l2) = dataset_to_idx(&ds).unwrap();
        assert_eq!((i, l), (i2, l2));
    }

    #[test]
    fn bilinear_keeps_constant_planes() {
        let src = vec![0.25f32; 28 * 28];
        let out = resize_bilinear(&src, 28, 28, 16, 16);
        assert_eq!(out.len(), 256);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn bilinear_identity_at_same_size() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
    }
}
