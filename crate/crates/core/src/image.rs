//! Grayscale 8-bit images and binary PGM (P5) I/O.

use std::io::Write;
use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Geometry(format!(
                "image buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel values scaled to [0, 1].
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_pgm_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        parse_pgm(&bytes, &path.display().to_string())
    }
}

/// Binary P6 PPM of `img` with each box outlined in its colour. Box edges are rounded to
/// pixels and clipped to the image.
pub fn boxes_ppm_bytes(img: &GrayImage, boxes: &[(BBox, [u8; 3])]) -> Vec<u8> {
    let (w, h) = (img.width, img.height);
    let mut rgb: Vec<u8> = img.data.iter().flat_map(|&v| [v, v, v]).collect();
    for (b, colour) in boxes {
        if !b.is_valid() || w == 0 || h == 0 {
            continue;
        }
        let clip = |v: f64, hi: usize| v.round().clamp(0.0, (hi - 1) as f64) as usize;
        let (x0, x1) = (clip(b.x, w), clip(b.x + b.w - 1.0, w));
        let (y0, y1) = (clip(b.y, h), clip(b.y + b.h - 1.0, h));
        let mut put = |x: usize, y: usize| rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(colour);
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    out
}

/// Parses a binary P5 PGM with maxval 255. Comments (`#` to end of line) are allowed in the header.
pub fn parse_pgm(bytes: &[u8], name: &str) -> Result<GrayImage> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse_offset(name, pos as u64, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::parse_offset(name, 0, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let parse_num = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::parse_offset(name, 0, format!("bad PGM header field {s:?}")))
    };
    let width = parse_num(&fields[1])?;
    let height = parse_num(&fields[2])?;
    let maxval = parse_num(&fields[3])?;
    if maxval != 255 {
        return Err(Error::parse_offset(name, 0, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::parse_offset(name, bytes.len() as u64, "truncated PGM raster"));
    }
    GrayImage::new(width, height, bytes[pos..pos + need].to_vec())
}

/// Bilinear resampling of a unit-valued single-channel raster.
///
/// Output pixel `(u, v)` samples the source at
/// `((u + 0.5) / scale_x + offset_x - 0.5, (v + 0.5) / scale_y + offset_y - 0.5)`,
/// replicating edge pixels outside the source.
pub fn resample_bilinear(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    out_w: usize,
    out_h: usize,
    offset: (f64, f64),
    scale: (f64, f64),
) -> Vec<f64> {
    if offset == (0.0, 0.0) && src_w == out_w && src_h == out_h && scale == (1.0, 1.0) {
        return src.to_vec();
    }
    let mut out = vec![0.0; out_w * out_h];
    let max_x = (src_w - 1) as f64;
    let max_y = (src_h - 1) as f64;
    for v in 0..out_h {
        let sy = ((v as f64 + 0.5) / scale.1 + offset.1 - 0.5).clamp(0.0, max_y);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let ly = sy - y0 as f64;
        for u in 0..out_w {
            let sx = ((u as f64 + 0.5) / scale.0 + offset.0 - 0.5).clamp(0.0, max_x);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let lx = sx - x0 as f64;
            let a = src[y0 * src_w + x0] * (1.0 - lx) + src[y0 * src_w + x1] * lx;
            let b = src[y1 * src_w + x0] * (1.0 - lx) + src[y1 * src_w + x1] * lx;
            out[v * out_w + u] = a * (1.0 - ly) + b * ly;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn ppm_outline() {
        let img = GrayImage::filled(6, 5, 10);
        let bytes = boxes_ppm_bytes(&img, &[(BBox::new(1.0, 1.0, 3.0, 3.0), [255, 0, 0])]);
        let header = b"P6\n6 5\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = |x: usize, y: usize| &bytes[header.len() + (y * 6 + x) * 3..][..3];
        assert_eq!(px(1, 1), &[255, 0, 0]);
        assert_eq!(px(3, 3), &[255, 0, 0]);
        assert_eq!(px(2, 2), &[10, 10, 10]);
        assert_eq!(px(0, 0), &[10, 10, 10]);
    }

    use super::*;

    #[test]
    fn pgm_roundtrip_with_comment() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = img.to_pgm_bytes();
        assert_eq!(parse_pgm(&bytes, "x").unwrap(), img);
        let mut commented = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&img.data);
        assert_eq!(parse_pgm(&commented, "x").unwrap(), img);
    }

    #[test]
    fn pgm_rejects_other_formats() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0", "x").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00", "x").is_err());
    }

    #[test]
    fn resample_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resample_bilinear(&src, 4, 3, 4, 3, (0.0, 0.0), (1.0, 1.0)), src);
        let c = vec![0.3; 20];
        let out = resample_bilinear(&c, 5, 4, 8, 8, (1.0, -2.0), (1.7, 2.0));
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }
}
