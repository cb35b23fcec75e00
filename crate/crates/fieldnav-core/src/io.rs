//! File formats for grids, fields, features, trajectories, priors, models,
//! and evaluation reports.
//!
//! Text formats print floats with Rust's shortest round-trip representation,
//! so every write/read cycle reproduces values bit for bit.  The model
//! checkpoint has a documented binary layout (magic, version, header, layer
//! dims, little-endian 64-bit floats) plus a comma-separated text fallback.

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::field::SuccessField;
use crate::flow::{Dense, FlowModel};
use crate::metrics::MetricsReport;
use crate::prior::MixturePrior;
use crate::trajectory::{Point2, Trajectory};
use crate::world::{generate_scenario, OccupancyGrid, Scenario, ScenarioKind};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Magic bytes opening a binary flow-model checkpoint.
pub const MODEL_MAGIC: [u8; 4] = *b"FNFM";
/// Checkpoint layout version written by this crate.
pub const MODEL_VERSION: u32 = 1;

fn open_text(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn parse_num<T: std::str::FromStr>(tok: &str, ctx: &str) -> Result<T> {
    tok.trim()
        .parse()
        .map_err(|_| Error::parse(ctx, format!("invalid number {:?}", tok.trim())))
}

// ---------------------------------------------------------------------------
// Occupancy grids: portable greymap (P2 ASCII / P5 binary) and CSV
// ---------------------------------------------------------------------------

/// Writes `grid` as a portable greymap; free cells are white (255), occupied
/// cells black (0).  `binary` selects P5 (raw bytes) over P2 (ASCII).  The
/// cell resolution travels in a `# resolution <r>` comment.
pub fn write_grid_pgm(path: &Path, grid: &OccupancyGrid, binary: bool) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let (w, h) = (grid.width(), grid.height());
    writeln!(out, "{}", if binary { "P5" } else { "P2" })?;
    writeln!(out, "# resolution {}", grid.resolution())?;
    writeln!(out, "{w} {h}")?;
    writeln!(out, "255")?;
    if binary {
        let mut bytes = Vec::with_capacity(w * h);
        for iy in 0..h {
            for ix in 0..w {
                bytes.push(if grid.is_occupied(ix, iy) { 0u8 } else { 255u8 });
            }
        }
        out.write_all(&bytes)?;
    } else {
        for iy in 0..h {
            let row: Vec<&str> = (0..w)
                .map(|ix| if grid.is_occupied(ix, iy) { "0" } else { "255" })
                .collect();
            writeln!(out, "{}", row.join(" "))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a P2 or P5 greymap written by [`write_grid_pgm`] (or any 8-bit PGM:
/// values below half the maxval count as occupied).  Resolution defaults to
/// 0.1 m when no `# resolution` comment is present.
pub fn read_grid_pgm(path: &Path) -> Result<OccupancyGrid> {
    let ctx = path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut resolution = crate::world::DEFAULT_RESOLUTION;

    // Tokenizer over the header: skips whitespace and `#` comments, watching
    // comments for the resolution annotation.
    let mut next_token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                let start = *pos;
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                let comment = String::from_utf8_lossy(&bytes[start..*pos]);
                let mut words = comment.trim_start_matches('#').split_whitespace();
                if words.next() == Some("resolution") {
                    if let Some(tok) = words.next() {
                        if let Ok(r) = tok.parse::<f64>() {
                            resolution = r;
                        }
                    }
                }
                continue;
            }
            break;
        }
        if *pos >= bytes.len() {
            return Err(Error::parse(&ctx, "unexpected end of greymap header"));
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&bytes, &mut pos)?;
    let binary = match magic.as_str() {
        "P2" => false,
        "P5" => true,
        other => {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unsupported greymap magic {other:?}"),
            ))
        }
    };
    let w: usize = parse_num(&next_token(&bytes, &mut pos)?, "greymap width")?;
    let h: usize = parse_num(&next_token(&bytes, &mut pos)?, "greymap height")?;
    let maxval: u32 = parse_num(&next_token(&bytes, &mut pos)?, "greymap maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected 8-bit greymap, got maxval {maxval}"),
        ));
    }
    let threshold = maxval / 2;
    let mut cells = Vec::with_capacity(w * h);
    if binary {
        pos += 1; // single whitespace byte after maxval
        if bytes.len() < pos + w * h {
            return Err(Error::parse(
                path.display().to_string(),
                "truncated P5 pixel data",
            ));
        }
        cells.extend(bytes[pos..pos + w * h].iter().map(|&b| u8::from(u32::from(b) <= threshold)));
    } else {
        for _ in 0..w * h {
            let v: u32 = parse_num(&next_token(&bytes, &mut pos)?, "greymap pixel")?;
            cells.push(u8::from(v <= threshold));
        }
    }
    OccupancyGrid::from_cells(w, h, resolution, cells)
}

/// Writes `grid` as a comma-separated table: header `width,height,resolution`,
/// a line with those values, then one row of 0/1 cells per grid row.
pub fn write_grid_csv(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "width,height,resolution")?;
    writeln!(out, "{},{},{}", grid.width(), grid.height(), grid.resolution())?;
    for iy in 0..grid.height() {
        let row: Vec<&str> = (0..grid.width())
            .map(|ix| if grid.is_occupied(ix, iy) { "1" } else { "0" })
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn read_dims_header(
    lines: &mut impl Iterator<Item = std::io::Result<String>>,
    ctx: &str,
) -> Result<(usize, usize, f64)> {
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(ctx, "missing header line"))??;
    if header.trim() != "width,height,resolution" {
        return Err(Error::parse(
            ctx,
            format!("expected header `width,height,resolution`, got {:?}", header.trim()),
        ));
    }
    let dims = lines
        .next()
        .ok_or_else(|| Error::parse(ctx, "missing dimensions line"))??;
    let parts: Vec<&str> = dims.trim().split(',').collect();
    if parts.len() != 3 {
        return Err(Error::parse(ctx, format!("expected 3 dimension fields, got {}", parts.len())));
    }
    Ok((
        parse_num(parts[0], "grid width")?,
        parse_num(parts[1], "grid height")?,
        parse_num(parts[2], "grid resolution")?,
    ))
}

/// Reads a comma-separated occupancy table written by [`write_grid_csv`].
pub fn read_grid_csv(path: &Path) -> Result<OccupancyGrid> {
    let ctx = path.display().to_string();
    let mut lines = open_text(path)?.lines();
    let (w, h, resolution) = read_dims_header(&mut lines, &ctx)?;
    let mut cells = Vec::with_capacity(w * h);
    for iy in 0..h {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(&ctx, format!("missing grid row {iy}")))??;
        let row: Vec<&str> = line.trim().split(',').collect();
        if row.len() != w {
            return Err(Error::parse(&ctx, format!("row {iy} has {} cells, expected {w}", row.len())));
        }
        for tok in row {
            let v: u8 = parse_num(tok, "grid cell")?;
            cells.push(v);
        }
    }
    OccupancyGrid::from_cells(w, h, resolution, cells)
}

// ---------------------------------------------------------------------------
// Success fields: CSV (exact) and 16-bit greymap (visualization)
// ---------------------------------------------------------------------------

/// Writes field values as a comma-separated table with the standard
/// `width,height,resolution` header.  Occupied cells carry their pinned value.
pub fn write_field_csv(path: &Path, field: &SuccessField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "width,height,resolution")?;
    writeln!(out, "{},{},{}", field.width(), field.height(), field.resolution())?;
    let values = field.raw_values();
    for iy in 0..field.height() {
        let row: Vec<String> = (0..field.width())
            .map(|ix| format!("{}", values[iy * field.width() + ix]))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads field values written by [`write_field_csv`] and reassembles a
/// [`SuccessField`] using the occupancy mask of `grid` and the given solver
/// weights.  Dimensions must match the grid exactly.
pub fn read_field_csv(path: &Path, grid: &OccupancyGrid, mu: f64, nu: f64) -> Result<SuccessField> {
    let ctx = path.display().to_string();
    let mut lines = open_text(path)?.lines();
    let (w, h, resolution) = read_dims_header(&mut lines, &ctx)?;
    if w != grid.width() || h != grid.height() {
        return Err(Error::parse(
            &ctx,
            format!(
                "field is {w}x{h} but grid is {}x{}",
                grid.width(),
                grid.height()
            ),
        ));
    }
    let mut values = Vec::with_capacity(w * h);
    for iy in 0..h {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(&ctx, format!("missing field row {iy}")))??;
        let row: Vec<&str> = line.trim().split(',').collect();
        if row.len() != w {
            return Err(Error::parse(&ctx, format!("row {iy} has {} values, expected {w}", row.len())));
        }
        for tok in row {
            values.push(parse_num::<f64>(tok, "field value")?);
        }
    }
    let occupied: Vec<bool> = (0..h)
        .flat_map(|iy| (0..w).map(move |ix| (ix, iy)))
        .map(|(ix, iy)| grid.is_occupied(ix, iy))
        .collect();
    SuccessField::from_values(w, h, resolution, values, occupied, mu, nu)
}

/// Exports the field as an ASCII greymap scaled to 16 bits (maxval 65535),
/// clamping values into [0, 1].  Intended for visualization interop, not
/// round-tripping.
pub fn write_field_pgm(path: &Path, field: &SuccessField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "P2")?;
    writeln!(out, "# resolution {}", field.resolution())?;
    writeln!(out, "{} {}", field.width(), field.height())?;
    writeln!(out, "65535")?;
    let values = field.raw_values();
    for iy in 0..field.height() {
        let row: Vec<String> = (0..field.width())
            .map(|ix| {
                let v = values[iy * field.width() + ix].clamp(0.0, 1.0);
                format!("{}", (v * 65535.0).round() as u32)
            })
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature sequences: CSV with header `T,D`
// ---------------------------------------------------------------------------

/// Writes a feature matrix (rows = frames) with the header `T,D`, a line with
/// the two sizes, then one comma-separated row per frame.
pub fn write_features_csv(path: &Path, features: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "T,D")?;
    writeln!(out, "{},{}", features.nrows(), features.ncols())?;
    for t in 0..features.nrows() {
        let row: Vec<String> = (0..features.ncols())
            .map(|d| format!("{}", features[(t, d)]))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a feature table written by [`write_features_csv`].
pub fn read_features_csv(path: &Path) -> Result<FeatureSequence> {
    let ctx = path.display().to_string();
    let mut lines = open_text(path)?.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(&ctx, "missing header line"))??;
    if header.trim() != "T,D" {
        return Err(Error::parse(&ctx, format!("expected header `T,D`, got {:?}", header.trim())));
    }
    let dims = lines
        .next()
        .ok_or_else(|| Error::parse(&ctx, "missing dimensions line"))??;
    let parts: Vec<&str> = dims.trim().split(',').collect();
    if parts.len() != 2 {
        return Err(Error::parse(&ctx, "expected `frames,dim` on the second line"));
    }
    let t: usize = parse_num(parts[0], "feature frame count")?;
    let d: usize = parse_num(parts[1], "feature dimension")?;
    let mut data = DMatrix::zeros(t, d);
    for row in 0..t {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(&ctx, format!("missing feature row {row}")))??;
        let toks: Vec<&str> = line.trim().split(',').collect();
        if toks.len() != d {
            return Err(Error::parse(&ctx, format!("row {row} has {} values, expected {d}", toks.len())));
        }
        for (col, tok) in toks.iter().enumerate() {
            data[(row, col)] = parse_num(tok, "feature value")?;
        }
    }
    FeatureSequence::new(data)
}

// ---------------------------------------------------------------------------
// Trajectories and mixture priors
// ---------------------------------------------------------------------------

/// Writes waypoints as comma-separated `k,x,y` rows under that header.
pub fn write_trajectory_csv(path: &Path, tau: &Trajectory) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_trajectory_body(&mut out, tau)?;
    out.flush()?;
    Ok(())
}

fn write_trajectory_body(out: &mut impl Write, tau: &Trajectory) -> Result<()> {
    writeln!(out, "k,x,y")?;
    for (k, p) in tau.points().iter().enumerate() {
        writeln!(out, "{k},{},{}", p.x, p.y)?;
    }
    Ok(())
}

/// Reads a `k,x,y` table written by [`write_trajectory_csv`].
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let ctx = path.display().to_string();
    let mut lines = open_text(path)?.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(&ctx, "missing header line"))??;
    if header.trim() != "k,x,y" {
        return Err(Error::parse(&ctx, format!("expected header `k,x,y`, got {:?}", header.trim())));
    }
    let mut pts = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pts.push(parse_waypoint(&line, pts.len(), &ctx)?);
    }
    Trajectory::new(pts)
}

fn parse_waypoint(line: &str, expect_k: usize, ctx: &str) -> Result<Point2> {
    let toks: Vec<&str> = line.trim().split(',').collect();
    if toks.len() != 3 {
        return Err(Error::parse(ctx, format!("expected `k,x,y`, got {:?}", line.trim())));
    }
    let k: usize = parse_num(toks[0], "waypoint index")?;
    if k != expect_k {
        return Err(Error::parse(ctx, format!("waypoint index {k} out of order, expected {expect_k}")));
    }
    Ok(Point2::new(
        parse_num(toks[1], "waypoint x")?,
        parse_num(toks[2], "waypoint y")?,
    ))
}

/// Writes a mixture prior: metadata comments, a `component,weight` preamble
/// block, then per-component sections each holding a `k,x,y` waypoint table.
///
/// ```text
/// # temperature=0.5
/// # scores=1.25,0.75,0.33
/// component,weight
/// 0,0.613...
/// ...
/// component,0
/// k,x,y
/// 0,1.25,0.35
/// ...
/// ```
pub fn write_mixture_csv(path: &Path, prior: &MixturePrior) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# temperature={}", prior.temperature)?;
    let scores: Vec<String> = prior.scores.iter().map(|s| format!("{s}")).collect();
    writeln!(out, "# scores={}", scores.join(","))?;
    writeln!(out, "component,weight")?;
    for (m, w) in prior.weights.iter().enumerate() {
        writeln!(out, "{m},{w}")?;
    }
    for (m, tau) in prior.components.iter().enumerate() {
        writeln!(out, "component,{m}")?;
        write_trajectory_body(&mut out, tau)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a mixture file written by [`write_mixture_csv`].
pub fn read_mixture_csv(path: &Path) -> Result<MixturePrior> {
    let ctx = path.display().to_string();
    let mut temperature = None;
    let mut scores: Option<Vec<f64>> = None;
    let mut weights: Vec<f64> = Vec::new();
    let mut components: Vec<Vec<Point2>> = Vec::new();

    #[derive(PartialEq)]
    enum State {
        Preamble,
        Weights,
        Waypoints,
    }
    let mut state = State::Preamble;
    for line in open_text(path)?.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("temperature=") {
                temperature = Some(parse_num::<f64>(v, "mixture temperature")?);
            } else if let Some(v) = comment.strip_prefix("scores=") {
                scores = Some(
                    v.split(',')
                        .map(|tok| parse_num::<f64>(tok, "mixture score"))
                        .collect::<Result<_>>()?,
                );
            }
            continue;
        }
        if trimmed == "component,weight" {
            state = State::Weights;
            continue;
        }
        if trimmed == "k,x,y" {
            state = State::Waypoints;
            continue;
        }
        if let Some(idx) = trimmed.strip_prefix("component,") {
            let m: usize = parse_num(idx, "component index")?;
            if m != components.len() {
                return Err(Error::parse(&ctx, format!("component {m} out of order, expected {}", components.len())));
            }
            components.push(Vec::new());
            continue;
        }
        match state {
            State::Weights => {
                let toks: Vec<&str> = trimmed.split(',').collect();
                if toks.len() != 2 {
                    return Err(Error::parse(&ctx, format!("expected `component,weight` row, got {trimmed:?}")));
                }
                let m: usize = parse_num(toks[0], "weight row index")?;
                if m != weights.len() {
                    return Err(Error::parse(&ctx, format!("weight row {m} out of order")));
                }
                weights.push(parse_num(toks[1], "mixture weight")?);
            }
            State::Waypoints => {
                let current = components
                    .last_mut()
                    .ok_or_else(|| Error::parse(&ctx, "waypoint row before any component section"))?;
                let p = parse_waypoint(trimmed, current.len(), &ctx)?;
                current.push(p);
            }
            State::Preamble => {
                return Err(Error::parse(&ctx, format!("unexpected line before preamble: {trimmed:?}")));
            }
        }
    }

    if components.len() != weights.len() || components.is_empty() {
        return Err(Error::parse(
            &ctx,
            format!("{} weights but {} component sections", weights.len(), components.len()),
        ));
    }
    let temperature = temperature.unwrap_or(crate::prior::DEFAULT_TEMPERATURE);
    // Scores are redundant with weights up to an additive constant; reconstruct
    // a consistent set when the comment is missing.
    let scores = match scores {
        Some(s) if s.len() == weights.len() => s,
        _ => weights.iter().map(|w| temperature * w.ln()).collect(),
    };
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::parse(&ctx, format!("mixture weights must be a distribution, sum {total}")));
    }
    let components = components
        .into_iter()
        .map(Trajectory::new)
        .collect::<Result<Vec<_>>>()?;
    Ok(MixturePrior {
        components,
        weights,
        scores,
        temperature,
    })
}

// ---------------------------------------------------------------------------
// Flow-model checkpoints: binary layout and text fallback
// ---------------------------------------------------------------------------

/// Writes a binary checkpoint.
///
/// Layout (all integers little-endian u32, floats little-endian f64):
/// magic `FNFM`, version, k_waypoints, context_dim, time_frequencies,
/// pos_scale (f64), layer count, then per layer rows and cols, then per layer
/// the weight matrix in column-major order followed by the bias vector.
pub fn write_model_binary(path: &Path, model: &FlowModel) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MODEL_MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    out.write_all(&(model.k_waypoints() as u32).to_le_bytes())?;
    out.write_all(&(model.context_dim() as u32).to_le_bytes())?;
    out.write_all(&(model.time_frequencies() as u32).to_le_bytes())?;
    out.write_all(&model.pos_scale().to_le_bytes())?;
    let layers = model.network().layers();
    out.write_all(&(layers.len() as u32).to_le_bytes())?;
    for layer in layers {
        out.write_all(&(layer.weight.nrows() as u32).to_le_bytes())?;
        out.write_all(&(layer.weight.ncols() as u32).to_le_bytes())?;
    }
    for layer in layers {
        for v in layer.weight.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in layer.bias.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Sequential reader over a checkpoint byte buffer.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    ctx: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.ctx, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let s = self.take(8)?;
        Ok(f64::from_le_bytes([
            s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7],
        ]))
    }
}

/// Reads a binary checkpoint written by [`write_model_binary`].
pub fn read_model_binary(path: &Path) -> Result<FlowModel> {
    let ctx = path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        ctx: &ctx,
    };

    let magic = cur.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::parse(&ctx, format!("bad checkpoint magic {magic:?}")));
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::parse(&ctx, format!("unsupported checkpoint version {version}")));
    }
    let k_waypoints = cur.u32()? as usize;
    let context_dim = cur.u32()? as usize;
    let time_frequencies = cur.u32()? as usize;
    let pos_scale = cur.f64()?;
    let n_layers = cur.u32()? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::parse(&ctx, format!("implausible layer count {n_layers}")));
    }
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        if rows == 0 || cols == 0 || rows * cols > 1 << 24 {
            return Err(Error::parse(&ctx, format!("implausible layer shape {rows}x{cols}")));
        }
        dims.push((rows, cols));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (rows, cols) in dims {
        let mut weight = DMatrix::zeros(rows, cols);
        for v in weight.iter_mut() {
            *v = cur.f64()?;
        }
        let mut bias = DVector::zeros(rows);
        for v in bias.iter_mut() {
            *v = cur.f64()?;
        }
        layers.push(Dense { weight, bias });
    }
    FlowModel::from_parts(k_waypoints, context_dim, time_frequencies, pos_scale, layers)
}

/// Writes the comma-separated text fallback checkpoint: a header block of
/// `key,value` lines, then per layer a `layer,<i>,<rows>,<cols>` marker, one
/// comma-separated line per weight row, and a final `bias,...` line.
pub fn write_model_text(path: &Path, model: &FlowModel) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "fieldnav-flow-model,{MODEL_VERSION}")?;
    writeln!(out, "k_waypoints,{}", model.k_waypoints())?;
    writeln!(out, "context_dim,{}", model.context_dim())?;
    writeln!(out, "time_frequencies,{}", model.time_frequencies())?;
    writeln!(out, "pos_scale,{}", model.pos_scale())?;
    let layers = model.network().layers();
    writeln!(out, "layers,{}", layers.len())?;
    for (i, layer) in layers.iter().enumerate() {
        writeln!(out, "layer,{i},{},{}", layer.weight.nrows(), layer.weight.ncols())?;
        for r in 0..layer.weight.nrows() {
            let row: Vec<String> = (0..layer.weight.ncols())
                .map(|c| format!("{}", layer.weight[(r, c)]))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        let bias: Vec<String> = layer.bias.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "bias,{}", bias.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the text fallback written by [`write_model_text`].
pub fn read_model_text(path: &Path) -> Result<FlowModel> {
    let ctx = path.display().to_string();
    let mut lines = open_text(path)?.lines();
    let mut next_line = |what: &str| -> Result<String> {
        loop {
            match lines.next() {
                Some(Ok(l)) if l.trim().is_empty() => continue,
                Some(Ok(l)) => return Ok(l),
                Some(Err(e)) => return Err(e.into()),
                None => return Err(Error::parse(&ctx, format!("missing {what}"))),
            }
        }
    };
    let kv = |line: &str, key: &str| -> Result<String> {
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(&ctx, format!("expected `{key},<value>`, got {line:?}")))?;
        if k.trim() != key {
            return Err(Error::parse(&ctx, format!("expected key {key}, got {k:?}")));
        }
        Ok(v.trim().to_string())
    };

    let head = next_line("format header")?;
    let version: u32 = parse_num(&kv(&head, "fieldnav-flow-model")?, "model version")?;
    if version != MODEL_VERSION {
        return Err(Error::parse(&ctx, format!("unsupported checkpoint version {version}")));
    }
    let k_waypoints: usize = parse_num(&kv(&next_line("k_waypoints")?, "k_waypoints")?, "k_waypoints")?;
    let context_dim: usize = parse_num(&kv(&next_line("context_dim")?, "context_dim")?, "context_dim")?;
    let time_frequencies: usize =
        parse_num(&kv(&next_line("time_frequencies")?, "time_frequencies")?, "time_frequencies")?;
    let pos_scale: f64 = parse_num(&kv(&next_line("pos_scale")?, "pos_scale")?, "pos_scale")?;
    let n_layers: usize = parse_num(&kv(&next_line("layers")?, "layers")?, "layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let marker = next_line("layer marker")?;
        let toks: Vec<&str> = marker.trim().split(',').collect();
        if toks.len() != 4 || toks[0] != "layer" {
            return Err(Error::parse(&ctx, format!("expected `layer,{i},rows,cols`, got {marker:?}")));
        }
        let idx: usize = parse_num(toks[1], "layer index")?;
        if idx != i {
            return Err(Error::parse(&ctx, format!("layer {idx} out of order, expected {i}")));
        }
        let rows: usize = parse_num(toks[2], "layer rows")?;
        let cols: usize = parse_num(toks[3], "layer cols")?;
        let mut weight = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let line = next_line("weight row")?;
            let toks: Vec<&str> = line.trim().split(',').collect();
            if toks.len() != cols {
                return Err(Error::parse(&ctx, format!("weight row {r} has {} values, expected {cols}", toks.len())));
            }
            for (c, tok) in toks.iter().enumerate() {
                weight[(r, c)] = parse_num(tok, "weight value")?;
            }
        }
        let bias_line = next_line("bias row")?;
        let toks: Vec<&str> = bias_line.trim().split(',').collect();
        if toks.len() != rows + 1 || toks[0] != "bias" {
            return Err(Error::parse(&ctx, format!("expected `bias,...` with {rows} values")));
        }
        let mut bias = DVector::zeros(rows);
        for (r, tok) in toks[1..].iter().enumerate() {
            bias[r] = parse_num(tok, "bias value")?;
        }
        layers.push(Dense { weight, bias });
    }
    FlowModel::from_parts(k_waypoints, context_dim, time_frequencies, pos_scale, layers)
}

// ---------------------------------------------------------------------------
// Scenario files (structured text configuration)
// ---------------------------------------------------------------------------

/// On-disk scenario schema: generation parameters plus the chosen endpoints.
/// Grids regenerate deterministically from (kind, seed, size), so cells are
/// not stored.  The seed is kept as a decimal string because derived seeds
/// use the full u64 range while TOML integers stop at i64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub seed: String,
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
}

impl ScenarioSpec {
    pub fn of(scenario: &Scenario) -> Self {
        Self {
            kind: scenario.kind,
            seed: scenario.seed.to_string(),
            width: scenario.grid.width(),
            height: scenario.grid.height(),
            resolution: scenario.grid.resolution(),
            start: [scenario.start.x, scenario.start.y],
            goal: [scenario.goal.x, scenario.goal.y],
        }
    }
}

/// Writes the scenario's structured text configuration (TOML).
pub fn write_scenario_toml(path: &Path, scenario: &Scenario) -> Result<()> {
    let spec = ScenarioSpec::of(scenario);
    let text = toml::to_string_pretty(&spec)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a scenario file and regenerates its grid from the stored parameters,
/// verifying that the stored endpoints and resolution match the regenerated
/// world.
pub fn read_scenario_toml(path: &Path) -> Result<Scenario> {
    let ctx = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let spec: ScenarioSpec =
        toml::from_str(&text).map_err(|e| Error::parse(&ctx, e.to_string()))?;
    let seed = parse_num::<u64>(&spec.seed, "scenario seed")?;
    let scenario = generate_scenario(spec.kind, seed, spec.width, spec.height)?;
    if (scenario.grid.resolution() - spec.resolution).abs() > 1e-12 {
        return Err(Error::parse(
            &ctx,
            format!(
                "stored resolution {} does not match generator resolution {}",
                spec.resolution,
                scenario.grid.resolution()
            ),
        ));
    }
    let start = Point2::new(spec.start[0], spec.start[1]);
    let goal = Point2::new(spec.goal[0], spec.goal[1]);
    if (scenario.start - start).norm() > 1e-9 || (scenario.goal - goal).norm() > 1e-9 {
        return Err(Error::parse(
            &ctx,
            "stored endpoints do not match the regenerated scenario",
        ));
    }
    Ok(scenario)
}

// ---------------------------------------------------------------------------
// Reports: line-delimited records and summary tables
// ---------------------------------------------------------------------------

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a file of line-delimited JSON records.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let ctx = path.display().to_string();
    let mut items = Vec::new();
    for (i, line) in open_text(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(&ctx, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(items)
}

/// One labeled row of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub coll: f64,
    pub ms: f64,
    pub sr_std: f64,
    pub spl_std: f64,
    pub coll_std: f64,
    pub ms_std: f64,
}

impl SummaryRow {
    pub fn from_report(label: impl Into<String>, report: &MetricsReport) -> Self {
        Self {
            label: label.into(),
            episodes: report.episodes,
            sr: report.sr,
            spl: report.spl,
            coll: report.collision_rate,
            ms: report.ms,
            sr_std: report.sr_std,
            spl_std: report.spl_std,
            coll_std: report.collision_std,
            ms_std: report.ms_std,
        }
    }
}

fn provenance_line(config_hash: &str, master_seed: u64) -> String {
    format!("# config={config_hash} seed={master_seed}")
}

/// Writes the comma-separated summary table.  The first line records the
/// configuration hash and master seed; the header uses the benchmark column
/// names SR, SPL, Coll., MS (plus spreads and episode counts).
pub fn write_summary_csv(
    path: &Path,
    config_hash: &str,
    master_seed: u64,
    rows: &[SummaryRow],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", provenance_line(config_hash, master_seed))?;
    writeln!(out, "mode,episodes,SR,SPL,Coll.,MS,SR_std,SPL_std,Coll._std,MS_std")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.label, r.episodes, r.sr, r.spl, r.coll, r.ms, r.sr_std, r.spl_std, r.coll_std, r.ms_std
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a summary table written by [`write_summary_csv`], returning the
/// provenance pair and the rows.
pub fn read_summary_csv(path: &Path) -> Result<(String, u64, Vec<SummaryRow>)> {
    let ctx = path.display().to_string();
    let mut lines = open_text(path)?.lines();
    let prov = lines
        .next()
        .ok_or_else(|| Error::parse(&ctx, "missing provenance line"))??;
    let (hash, seed) = parse_provenance(&prov, &ctx)?;
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(&ctx, "missing header line"))??;
    if !header.starts_with("mode,episodes,SR,SPL,Coll.,MS") {
        return Err(Error::parse(&ctx, format!("unexpected summary header {header:?}")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.trim().split(',').collect();
        if toks.len() != 10 {
            return Err(Error::parse(&ctx, format!("expected 10 fields, got {}", toks.len())));
        }
        rows.push(SummaryRow {
            label: toks[0].to_string(),
            episodes: parse_num(toks[1], "episode count")?,
            sr: parse_num(toks[2], "SR")?,
            spl: parse_num(toks[3], "SPL")?,
            coll: parse_num(toks[4], "Coll.")?,
            ms: parse_num(toks[5], "MS")?,
            sr_std: parse_num(toks[6], "SR_std")?,
            spl_std: parse_num(toks[7], "SPL_std")?,
            coll_std: parse_num(toks[8], "Coll._std")?,
            ms_std: parse_num(toks[9], "MS_std")?,
        });
    }
    Ok((hash, seed, rows))
}

fn parse_provenance(line: &str, ctx: &str) -> Result<(String, u64)> {
    let body = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(ctx, "missing `# config=... seed=...` line"))?;
    let mut hash = None;
    let mut seed = None;
    for word in body.split_whitespace() {
        if let Some(v) = word.strip_prefix("config=") {
            hash = Some(v.to_string());
        } else if let Some(v) = word.strip_prefix("seed=") {
            seed = Some(parse_num::<u64>(v, "master seed")?);
        }
    }
    match (hash, seed) {
        (Some(h), Some(s)) => Ok((h, s)),
        _ => Err(Error::parse(ctx, format!("malformed provenance line {line:?}"))),
    }
}

/// Writes the plot-ready refinement-steps sweep table with header `N,SR,coll`,
/// prefixed by the same provenance line as the summary table.
pub fn write_sweep_csv(
    path: &Path,
    config_hash: &str,
    master_seed: u64,
    rows: &[(usize, f64, f64)],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", provenance_line(config_hash, master_seed))?;
    writeln!(out, "N,SR,coll")?;
    for (n, sr, coll) in rows {
        writeln!(out, "{n},{sr},{coll}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a sweep table written by [`write_sweep_csv`].
pub fn read_sweep_csv(path: &Path) -> Result<(String, u64, Vec<(usize, f64, f64)>)> {
    let ctx = path.display().to_string();
    let mut lines = open_text(path)?.lines();
    let prov = lines
        .next()
        .ok_or_else(|| Error::parse(&ctx, "missing provenance line"))??;
    let (hash, seed) = parse_provenance(&prov, &ctx)?;
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(&ctx, "missing header line"))??;
    if header.trim() != "N,SR,coll" {
        return Err(Error::parse(&ctx, format!("expected header `N,SR,coll`, got {header:?}")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.trim().split(',').collect();
        if toks.len() != 3 {
            return Err(Error::parse(&ctx, format!("expected 3 fields, got {}", toks.len())));
        }
        rows.push((
            parse_num(toks[0], "sweep N")?,
            parse_num(toks[1], "sweep SR")?,
            parse_num(toks[2], "sweep coll")?,
        ));
    }
    Ok((hash, seed, rows))
}
