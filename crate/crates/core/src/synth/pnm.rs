//! Binary portable pixmap (P6, 8-bit) reading and writing. The header
//! grammar follows the netpbm convention: whitespace-separated tokens with
//! `#` comments running to end of line, then a single whitespace byte
//! before the raster.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{io_with_path, Error, Result};

pub fn write_p6(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Argument(format!(
            "raster has {} bytes, {width}x{height} needs {}",
            rgb.len(),
            3 * width * height
        )));
    }
    let mut out = Vec::with_capacity(20 + rgb.len());
    write!(out, "P6\n{width} {height}\n255\n").expect("vec write");
    out.extend_from_slice(rgb);
    fs::write(path, out).map_err(|e| Error::Io(io_with_path(e, path)))
}

pub fn read_p6(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::Io(io_with_path(e, path)))?;
    parse_p6(&bytes).map_err(|e| match e {
        Error::Format { line, message } => {
            Error::Format { line, message: format!("{}: {message}", path.display()) }
        }
        other => other,
    })
}

/// Pulls the next header token, skipping whitespace and comments; tracks
/// the 1-based line for error reports.
fn next_token(bytes: &[u8], pos: &mut usize, line: &mut usize) -> Option<Vec<u8>> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            if bytes[*pos] == b'\n' {
                *line += 1;
            }
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(bytes[start..*pos].to_vec())
}

pub fn parse_p6(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut line = 1;
    let fail = |line: usize, message: String| Error::Format { line, message };
    let magic = next_token(bytes, &mut pos, &mut line)
        .ok_or_else(|| fail(line, "empty pixmap".into()))?;
    if magic != b"P6" {
        return Err(fail(line, format!("expected P6 magic, got {:?}", String::from_utf8_lossy(&magic))));
    }
    let dim = |name: &str, pos: &mut usize, line: &mut usize| -> Result<usize> {
        let tok = next_token(bytes, pos, line)
            .ok_or_else(|| fail(*line, format!("missing {name}")))?;
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| {
                fail(*line, format!("bad {name} {:?}", String::from_utf8_lossy(&tok)))
            })
    };
    let width = dim("width", &mut pos, &mut line)?;
    let height = dim("height", &mut pos, &mut line)?;
    let maxval = dim("maxval", &mut pos, &mut line)?;
    if maxval != 255 {
        return Err(fail(line, format!("only maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(line, "missing raster separator".into()));
    }
    pos += 1;
    let need = 3 * width * height;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err(fail(
            line,
            format!("raster has {} bytes, {width}x{height} needs {need}", raster.len()),
        ));
    }
    Ok((width, height, raster.to_vec()))
}
