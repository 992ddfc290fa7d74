//! On-disk formats: portable graymaps and annotation CSV.

use super::{Annotation, AnnotationSet, Image};
use crate::error::{Error, Result};
use crate::field::Field2;
use crate::scalar::{real, Real};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Graymap flavor: `Ascii` is P2, `Binary` is P5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmFormat {
    Ascii,
    Binary,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), detail: detail.into() }
}

/// Writes an image as an 8-bit graymap, quantizing each pixel to
/// `round(p * 255)`.
pub fn save_image<T: Real>(path: impl AsRef<Path>, image: &Image<T>, format: PgmFormat) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (image.height(), image.width());
    let quantized: Vec<u8> = image
        .pixels()
        .as_slice()
        .iter()
        .map(|&p| (p.to_f64().unwrap() * 255.0).round() as u8)
        .collect();

    let mut out = Vec::with_capacity(quantized.len() + 32);
    match format {
        PgmFormat::Binary => {
            write!(out, "P5\n{} {}\n255\n", w, h)?;
            out.extend_from_slice(&quantized);
        }
        PgmFormat::Ascii => {
            write!(out, "P2\n{} {}\n255\n", w, h)?;
            for row in quantized.chunks(w) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a P2 or P5 graymap with max value 255 into unit-range pixels.
pub fn load_image<T: Real>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut cursor = 0usize;

    let magic = next_token(&bytes, &mut cursor)
        .ok_or_else(|| format_err(path, "missing magic number"))?;
    let binary = match magic.as_str() {
        "P5" => true,
        "P2" => false,
        other => return Err(format_err(path, format!("unsupported magic {other:?}"))),
    };

    let mut header = [0usize; 3];
    for slot in &mut header {
        let tok = next_token(&bytes, &mut cursor)
            .ok_or_else(|| format_err(path, "truncated header"))?;
        *slot = tok
            .parse()
            .map_err(|_| format_err(path, format!("bad header token {tok:?}")))?;
    }
    let [w, h, maxval] = header;
    if maxval != 255 {
        return Err(format_err(path, format!("max value must be 255, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(format_err(path, "zero image dimension"));
    }

    let mut values = Vec::with_capacity(w * h);
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let raster = &bytes[cursor..];
        if raster.len() < w * h {
            return Err(format_err(path, "truncated raster"));
        }
        values.extend(raster[..w * h].iter().map(|&b| b as u16));
    } else {
        for _ in 0..w * h {
            let tok = next_token(&bytes, &mut cursor)
                .ok_or_else(|| format_err(path, "truncated raster"))?;
            let v: u16 = tok
                .parse()
                .map_err(|_| format_err(path, format!("bad sample {tok:?}")))?;
            values.push(v);
        }
    }
    if values.iter().any(|&v| v > 255) {
        return Err(format_err(path, "sample exceeds max value"));
    }

    let pixels: Vec<T> = values.iter().map(|&v| real::<T>(v as f64 / 255.0)).collect();
    Image::from_field(Field2::from_vec(h, w, pixels)?)
}

/// Advances over whitespace and `#` comments, returning the next token.
/// After the token, exactly one trailing whitespace byte is consumed so a
/// P5 raster can start immediately afterwards.
fn next_token(bytes: &[u8], cursor: &mut usize) -> Option<String> {
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
            continue;
        }
        break;
    }
    let start = *cursor;
    while *cursor < bytes.len() && !bytes[*cursor].is_ascii_whitespace() {
        *cursor += 1;
    }
    if *cursor > start {
        let tok = String::from_utf8_lossy(&bytes[start..*cursor]).into_owned();
        if *cursor < bytes.len() {
            *cursor += 1;
        }
        Some(tok)
    } else {
        None
    }
}

/// Writes annotations as UTF-8 CSV with header `cx,cy,radius,class_id`
/// and LF line endings. Floats use the shortest representation that parses
/// back to the same value, so save/load round-trips exactly.
pub fn save_annotations(path: impl AsRef<Path>, set: &AnnotationSet) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["cx", "cy", "radius", "class_id"])?;
    for a in &set.items {
        writer.write_record([
            a.cx.to_string(),
            a.cy.to_string(),
            a.radius.to_string(),
            a.class_id.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads an annotation CSV; the set's `image_id` is the file stem.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    {
        let headers = reader.headers()?;
        let expect = ["cx", "cy", "radius", "class_id"];
        if headers.len() != 4 || headers.iter().zip(expect).any(|(h, e)| h != e) {
            return Err(format_err(path, format!("bad header {:?}", headers)));
        }
    }
    let mut items = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| format_err(path, "short record"))
        };
        let parse_f = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| format_err(path, format!("bad number {:?}", record.get(i))))
        };
        let class_id: u32 = field(3)?
            .parse()
            .map_err(|_| format_err(path, format!("bad class id {:?}", record.get(3))))?;
        if class_id == 0 {
            return Err(format_err(path, "class_id must be positive"));
        }
        let (cx, cy, radius) = (parse_f(0)?, parse_f(1)?, parse_f(2)?);
        if !(radius > 0.0 && radius.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(format_err(path, format!("bad geometry in {:?}", record)));
        }
        items.push(Annotation { cx, cy, radius, class_id });
    }
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AnnotationSet { image_id, items })
}
