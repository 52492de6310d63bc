//! Minimal PNM support: P3 PPM writing for scene renders and P2/P5 PGM
//! reading for user-provided mask files.

use ndarray::Array2;
use std::io::{self, BufRead, Write};
use std::path::Path;

/// Writes an RGB image as ASCII PPM. `comments` lines are embedded after the
/// magic number for provenance; they must not contain newlines.
pub fn write_ppm(
    w: &mut impl Write,
    width: usize,
    height: usize,
    rgb: &[(u8, u8, u8)],
    comments: &[String],
) -> io::Result<()> {
    assert_eq!(rgb.len(), width * height);
    writeln!(w, "P3")?;
    for c in comments {
        debug_assert!(!c.contains('\n'));
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "{width} {height}")?;
    writeln!(w, "255")?;
    for row in rgb.chunks(width) {
        let line: Vec<String> =
            row.iter().map(|(r, g, b)| format!("{r} {g} {b}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// A grayscale image read from a PGM file.
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples.
    pub pixels: Vec<u16>,
}

impl Gray {
    /// Threshold at half of maxval: strictly brighter pixels become 1.0.
    pub fn to_mask(&self) -> Array2<f64> {
        let half = self.maxval / 2;
        Array2::from_shape_vec(
            (self.height, self.width),
            self.pixels.iter().map(|&p| if p > half { 1.0 } else { 0.0 }).collect(),
        )
        .expect("pixel count checked at read time")
    }
}

/// Reads a P2 (ASCII) or P5 (binary) PGM file.
pub fn read_pgm(path: &Path) -> io::Result<Gray> {
    read_pgm_from(&mut io::BufReader::new(std::fs::File::open(path)?))
}

pub fn read_pgm_from(r: &mut impl BufRead) -> io::Result<Gray> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());

    let magic = data.get(..2).ok_or_else(|| bad("truncated PGM"))?;
    let binary = match magic {
        b"P2" => false,
        b"P5" => true,
        _ => return Err(bad("not a P2/P5 PGM")),
    };

    // Tokenize the header, skipping '#' comments; returns (value, next pos).
    let mut pos = 2;
    let next_int = |data: &[u8], pos: &mut usize| -> io::Result<u64> {
        loop {
            while *pos < data.len() && data[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < data.len() && data[*pos] == b'#' {
                while *pos < data.len() && data[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < data.len() && data[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "expected integer in PGM"));
        }
        std::str::from_utf8(&data[start..*pos])
            .unwrap()
            .parse()
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad integer in PGM"))
    };

    let width = next_int(&data, &mut pos)? as usize;
    let height = next_int(&data, &mut pos)? as usize;
    let maxval_raw = next_int(&data, &mut pos)?;
    if width == 0 || height == 0 || maxval_raw == 0 || maxval_raw > 65535 {
        return Err(bad("bad PGM dimensions"));
    }
    let maxval = maxval_raw as u16;

    let count = width * height;
    let mut pixels = Vec::with_capacity(count);
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let wide = maxval > 255;
        let bytes_per = if wide { 2 } else { 1 };
        let raster = data
            .get(pos..pos + count * bytes_per)
            .ok_or_else(|| bad("truncated PGM raster"))?;
        for chunk in raster.chunks(bytes_per) {
            pixels.push(if wide {
                u16::from_be_bytes([chunk[0], chunk[1]])
            } else {
                chunk[0] as u16
            });
        }
    } else {
        for _ in 0..count {
            pixels.push(next_int(&data, &mut pos)? as u16);
        }
    }
    if pixels.iter().any(|&p| p > maxval) {
        return Err(bad("PGM sample exceeds maxval"));
    }
    Ok(Gray { width, height, maxval, pixels })
}

/// Writes a P2 PGM; used by tests and for mask fixtures.
pub fn write_pgm_p2(
    w: &mut impl Write,
    width: usize,
    height: usize,
    pixels: &[u16],
    maxval: u16,
) -> io::Result<()> {
    assert_eq!(pixels.len(), width * height);
    writeln!(w, "P2")?;
    writeln!(w, "{width} {height}")?;
    writeln!(w, "{maxval}")?;
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}
