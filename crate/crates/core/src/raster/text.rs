//! Plain-text raster grid, handy for hand-written test inputs.
//!
//! ```text
//! width 2
//! height 2
//! origin 500000 4000000 15 N
//! pixel_size 10
//! nodata none
//! band R
//! 1 2
//! 3 4
//! band G
//! ...
//! ```
//!
//! `#` starts a comment line. Each band lists `height` rows of `width`
//! whitespace-separated numbers.

use std::io::{BufRead, Write};

use super::{Band, RasterError, RasterGrid};
use crate::geo::{Hemisphere, ProjPoint};

fn bad(line: usize, msg: impl std::fmt::Display) -> RasterError {
    RasterError::InvalidInput(format!("text grid line {line}: {msg}"))
}

fn number(line: usize, s: &str) -> Result<f64, RasterError> {
    s.parse::<f64>()
        .map_err(|_| bad(line, format!("not a number: {s}")))
}

pub fn read_text_grid<R: BufRead>(input: R) -> Result<RasterGrid, RasterError> {
    let mut width = None;
    let mut height = None;
    let mut origin = None;
    let mut pixel_size = None;
    let mut nodata = None;
    let mut bands: Vec<Band> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "width" | "height" if fields.len() == 2 => {
                let v: usize = fields[1]
                    .parse()
                    .map_err(|_| bad(line_no, "dimension must be a whole number"))?;
                if fields[0] == "width" {
                    width = Some(v);
                } else {
                    height = Some(v);
                }
            }
            "origin" if fields.len() == 5 => {
                let zone: u8 = fields[3]
                    .parse()
                    .map_err(|_| bad(line_no, "bad zone"))?;
                let hemi = match fields[4] {
                    "N" => Hemisphere::North,
                    "S" => Hemisphere::South,
                    h => return Err(bad(line_no, format!("hemisphere must be N or S, got {h}"))),
                };
                origin = Some(ProjPoint::new(
                    number(line_no, fields[1])?,
                    number(line_no, fields[2])?,
                    zone,
                    hemi,
                ));
            }
            "pixel_size" if fields.len() == 2 => pixel_size = Some(number(line_no, fields[1])?),
            "nodata" if fields.len() == 2 => {
                nodata = match fields[1] {
                    "none" => None,
                    v => Some(number(line_no, v)?),
                }
            }
            "band" if fields.len() == 2 => bands.push(Band {
                name: fields[1].to_string(),
                data: Vec::new(),
            }),
            _ => {
                let band = bands
                    .last_mut()
                    .ok_or_else(|| bad(line_no, format!("unexpected line: {line}")))?;
                for f in fields {
                    band.data.push(number(line_no, f)?);
                }
            }
        }
    }
    let missing = |what: &str| RasterError::NoGeoref(format!("text grid lacks {what}"));
    let width = width.ok_or_else(|| RasterError::InvalidInput("text grid lacks width".into()))?;
    let height = height.ok_or_else(|| RasterError::InvalidInput("text grid lacks height".into()))?;
    let origin = origin.ok_or_else(|| missing("origin"))?;
    let pixel_size = pixel_size.ok_or_else(|| missing("pixel_size"))?;
    RasterGrid::new(width, height, origin, pixel_size, nodata, bands)
}

pub fn write_text_grid<W: Write>(mut out: W, grid: &RasterGrid) -> Result<(), RasterError> {
    let o = grid.origin();
    let hemi = match o.hemisphere {
        Hemisphere::North => "N",
        Hemisphere::South => "S",
    };
    writeln!(out, "width {}", grid.width())?;
    writeln!(out, "height {}", grid.height())?;
    writeln!(out, "origin {} {} {} {}", o.easting, o.northing, o.zone, hemi)?;
    writeln!(out, "pixel_size {}", grid.pixel_size_m())?;
    match grid.nodata() {
        Some(v) => writeln!(out, "nodata {v}")?,
        None => writeln!(out, "nodata none")?,
    }
    for band in grid.bands() {
        writeln!(out, "band {}", band.name)?;
        for row in band.data.chunks(grid.width()) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{}", cells.join(" "))?;
        }
    }
    Ok(())
}
