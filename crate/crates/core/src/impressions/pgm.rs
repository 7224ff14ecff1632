//! Binary greyscale PGM (P5, maxval 255) export.

use std::fs;
use std::path::{Path, PathBuf};

use super::TransferSet;
use crate::data::write_atomically;
use crate::error::{Error, FormatError, Result};

/// Encodes a single-channel `h x w` image in `[0, 1]` as P5.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != w * h {
        return Err(Error::Dimension(format!(
            "{} pixels for a {w}x{h} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    write_atomically(path, &out)
}

/// Reads a P5 file written by [`write_pgm`]: `(width, height, bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |m: &str| Error::from(FormatError::Malformed(format!("{}: {m}", path.display())));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("header ended early"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(malformed("not an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| malformed("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| malformed("bad height"))?;
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(malformed("pixel count does not match header"));
    }
    Ok((w, h, data.to_vec()))
}

/// Writes one PGM per impression into `dir` and returns the paths, named
/// `<kind>_<index>_class<k>_beta<b>.pgm`.
pub fn export_impression_images(set: &TransferSet, dir: &Path) -> Result<Vec<PathBuf>> {
    let [h, w, c] = set.provenance.image_shape;
    if c != 1 {
        return Err(Error::Dimension(format!("PGM export needs one channel, images have {c}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let kind = set.provenance.kind.as_str();
    set.impressions
        .iter()
        .enumerate()
        .map(|(i, imp)| {
            let path = dir.join(format!(
                "{kind}_{i:06}_class{}_beta{}.pgm",
                imp.class_index, imp.beta
            ));
            write_pgm(&path, w, h, imp.image.data())?;
            Ok(path)
        })
        .collect()
}
