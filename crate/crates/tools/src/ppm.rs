//! Binary (P6) PPM reading and writing for the planar `Image` type.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use laneid_core::brightness::Image;

use crate::error::{io_err, Error, Result};

/// Writes an image as binary PPM (P6, maxval 255).
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
    w.write_all(header.as_bytes()).map_err(io_err(path))?;
    let mut row = Vec::with_capacity(img.width() * 3);
    for y in 0..img.height() {
        row.clear();
        for x in 0..img.width() {
            row.push(img.pixel(0, y, x));
            row.push(img.pixel(1, y, x));
            row.push(img.pixel(2, y, x));
        }
        w.write_all(&row).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a binary PPM (P6, maxval 255). Header comments are skipped.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut pos = 0usize;

    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { path: path.to_path_buf(), detail: "unexpected end of header".into() });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "P6" {
        return Err(Error::Format { path: path.to_path_buf(), detail: format!("expected P6, got {magic:?}") });
    }
    let parse = |s: String| -> Result<usize> {
        s.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad header number {s:?}"),
        })
    };
    let width = parse(token(&bytes)?)?;
    let height = parse(token(&bytes)?)?;
    let maxval = parse(token(&bytes)?)?;
    if maxval != 255 {
        return Err(Error::Format { path: path.to_path_buf(), detail: format!("unsupported maxval {maxval}") });
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("raster needs {need} bytes, file has {}", bytes.len().saturating_sub(pos)),
        });
    }
    let raster = &bytes[pos..pos + need];
    let mut planes = [vec![0u8; width * height], vec![0u8; width * height], vec![0u8; width * height]];
    for i in 0..width * height {
        planes[0][i] = raster[3 * i];
        planes[1][i] = raster[3 * i + 1];
        planes[2][i] = raster[3 * i + 2];
    }
    Image::from_planes(width, height, planes).map_err(Error::from)
}
