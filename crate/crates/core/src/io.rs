//! File codecs: binary PGM/PPM, Middlebury `.flo`, the `MLTN` logits
//! format, headerless CSV matrices, crop lists, depth-frame directories and
//! factorization directories.
//!
//! Decoding errors report the byte offset at which the input stopped making
//! sense.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fields::{FlowField, Image, LabelMap, Mask};
use crate::propagate::Logits;
use crate::sampling::{Crop, DepthClip, DepthMap};
use crate::url::Factorization;

pub const FLO_TAG: f32 = 202021.25;
pub const LOGITS_MAGIC: &[u8; 4] = b"MLTN";
pub const LOGITS_VERSION: u32 = 1;
/// Largest accepted raster side, guarding against corrupt headers.
pub const MAX_DIM: usize = 1 << 16;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn name(path: &Path) -> String {
    path.display().to_string()
}

/// Decoded binary Netpbm raster. Samples are 8-bit for `maxval <= 255` and
/// 16-bit big-endian otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Cursor<'_> {
    fn error(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, msg)
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn header_int(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(self.path, start as u64, format!("{what} is too large")))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn check_dim(cur: &Cursor, w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 || w > MAX_DIM || h > MAX_DIM {
        return Err(cur.error(format!("dimensions {w}x{h} outside 1..={MAX_DIM}")));
    }
    Ok(())
}

pub fn decode_pnm(bytes: &[u8], path: &str) -> Result<Pnm> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let channels = match cur.take(2, "magic")? {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(Error::format(path, 0, "expected magic P5 or P6"));
        }
    };
    let width = cur.header_int("width")?;
    let height = cur.header_int("height")?;
    check_dim(&cur, width, height)?;
    let maxval = cur.header_int("maxval")?;
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(cur.error(format!("maxval {maxval} outside 1..=65535")));
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.error("expected a single whitespace byte after maxval"));
    }
    cur.pos += 1;
    let count = width * height * channels;
    let samples: Vec<u16> = if maxval <= 255 {
        cur.take(count, "raster")?.iter().map(|&b| b as u16).collect()
    } else {
        cur.take(count * 2, "raster")?
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(i) = samples.iter().position(|&s| s as usize > maxval) {
        return Err(Error::format(path, (cur.pos - count + i) as u64, format!("sample exceeds maxval {maxval}")));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pnm(pnm: &Pnm) -> Vec<u8> {
    let magic = if pnm.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", pnm.width, pnm.height, pnm.maxval).into_bytes();
    if pnm.maxval <= 255 {
        out.extend(pnm.samples.iter().map(|&s| s as u8));
    } else {
        out.extend(pnm.samples.iter().flat_map(|s| s.to_be_bytes()));
    }
    out
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    decode_pnm(&read_bytes(path)?, &name(path))
}

pub fn write_pnm(path: &Path, pnm: &Pnm) -> Result<()> {
    write_bytes(path, &encode_pnm(pnm))
}

/// Loads samples as `value / maxval`.
pub fn read_image(path: &Path) -> Result<Image> {
    let p = read_pnm(path)?;
    let scale = p.maxval as f64;
    Image::new(p.width, p.height, p.channels, p.samples.iter().map(|&s| s as f64 / scale).collect())
}

/// Stores samples as `round(255 * value)`.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let samples = img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u16).collect();
    write_pnm(
        path,
        &Pnm {
            width: img.width(),
            height: img.height(),
            channels: img.channels(),
            maxval: 255,
            samples,
        },
    )
}

fn gray_pnm(path: &Path, what: &str) -> Result<Pnm> {
    let p = read_pnm(path)?;
    if p.channels != 1 || p.maxval > 255 {
        return Err(Error::format(name(path), 0, format!("{what} must be an 8-bit P5 file")));
    }
    Ok(p)
}

/// Label ids from an 8-bit PGM with 255 as VOID; `classes` defaults to one
/// more than the largest id.
pub fn read_labels(path: &Path, classes: Option<usize>) -> Result<LabelMap> {
    let p = gray_pnm(path, "label map")?;
    let ids: Vec<u8> = p.samples.iter().map(|&s| s as u8).collect();
    match classes {
        Some(c) => LabelMap::new(p.width, p.height, c, ids),
        None => LabelMap::infer_classes(p.width, p.height, ids),
    }
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_pnm(
        path,
        &Pnm {
            width: labels.width(),
            height: labels.height(),
            channels: 1,
            maxval: 255,
            samples: labels.ids().iter().map(|&i| i as u16).collect(),
        },
    )
}

/// Mask from an 8-bit PGM holding only 0 and 255.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let p = gray_pnm(path, "mask")?;
    if let Some(i) = p.samples.iter().position(|&s| s != 0 && s != 255) {
        let header = encode_pnm(&Pnm { samples: vec![], ..p.clone() }).len();
        return Err(Error::format(name(path), (header + i) as u64, "mask samples must be 0 or 255"));
    }
    Mask::new(p.width, p.height, p.samples.iter().map(|&s| s == 255).collect())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pnm(
        path,
        &Pnm {
            width: mask.width(),
            height: mask.height(),
            channels: 1,
            maxval: 255,
            samples: mask.flags().iter().map(|&f| if f { 255 } else { 0 }).collect(),
        },
    )
}

fn le_u32(cur: &mut Cursor, what: &str) -> Result<u32> {
    let b = cur.take(4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn le_f32s(cur: &mut Cursor, count: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = cur.take(count * 4, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn expect_end(cur: &Cursor) -> Result<()> {
    if cur.pos != cur.bytes.len() {
        return Err(cur.error(format!("{} trailing bytes", cur.bytes.len() - cur.pos)));
    }
    Ok(())
}

fn non_finite(path: &str, header: usize, values: &[f32]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, (header + 4 * i) as u64, "non-finite value"));
    }
    Ok(())
}

/// Decodes a `.flo` payload; values are widened from `f32`.
pub fn decode_flo(bytes: &[u8], path: &str) -> Result<FlowField> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let tag = f32::from_bits(le_u32(&mut cur, "tag")?);
    if tag != FLO_TAG {
        return Err(Error::format(path, 0, format!("bad tag {tag}, expected {FLO_TAG}")));
    }
    let width = le_u32(&mut cur, "width")? as i32;
    let height = le_u32(&mut cur, "height")? as i32;
    if width <= 0 || height <= 0 {
        return Err(Error::format(path, 4, format!("dimensions {width}x{height} must be positive")));
    }
    let (width, height) = (width as usize, height as usize);
    check_dim(&cur, width, height)?;
    let values = le_f32s(&mut cur, width * height * 2, "flow payload")?;
    expect_end(&cur)?;
    non_finite(path, 12, &values)?;
    let u = values.iter().step_by(2).map(|&x| x as f64).collect();
    let v = values.iter().skip(1).step_by(2).map(|&x| x as f64).collect();
    FlowField::new(width, height, u, v)
}

/// Encodes a field as `.flo`; components are narrowed to `f32`.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.len());
    out.extend(FLO_TAG.to_le_bytes());
    out.extend((flow.width() as i32).to_le_bytes());
    out.extend((flow.height() as i32).to_le_bytes());
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        out.extend((u as f32).to_le_bytes());
        out.extend((v as f32).to_le_bytes());
    }
    out
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&read_bytes(path)?, &name(path))
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_bytes(path, &encode_flo(flow))
}

pub fn decode_logits(bytes: &[u8], path: &str) -> Result<Logits> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4, "magic")? != LOGITS_MAGIC {
        return Err(Error::format(path, 0, "expected magic MLTN"));
    }
    let version = le_u32(&mut cur, "version")?;
    if version != LOGITS_VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let height = le_u32(&mut cur, "height")? as usize;
    let width = le_u32(&mut cur, "width")? as usize;
    let channels = le_u32(&mut cur, "channels")? as usize;
    check_dim(&cur, width, height)?;
    if !(2..=255).contains(&channels) {
        return Err(Error::format(path, 16, format!("channel count {channels} outside 2..=255")));
    }
    let values = le_f32s(&mut cur, width * height * channels, "logits payload")?;
    expect_end(&cur)?;
    non_finite(path, 20, &values)?;
    Logits::new(width, height, channels, values.iter().map(|&x| x as f64).collect())
}

pub fn encode_logits(logits: &Logits) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * logits.data().len());
    out.extend(LOGITS_MAGIC);
    for v in [
        LOGITS_VERSION,
        logits.height() as u32,
        logits.width() as u32,
        logits.classes() as u32,
    ] {
        out.extend(v.to_le_bytes());
    }
    for &s in logits.data() {
        out.extend((s as f32).to_le_bytes());
    }
    out
}

pub fn read_logits(path: &Path) -> Result<Logits> {
    decode_logits(&read_bytes(path)?, &name(path))
}

pub fn write_logits(path: &Path, logits: &Logits) -> Result<()> {
    write_bytes(path, &encode_logits(logits))
}

/// Parses a headerless comma-separated numeric matrix.
pub fn parse_matrix_csv(text: &str, path: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            Error::format(path, offset, e.to_string())
        })?;
        let offset = record.position().map_or(0, |p| p.byte());
        if cols.is_some_and(|c| c != record.len()) {
            return Err(Error::format(path, offset, format!("row {} has {} columns, expected {}", rows + 1, record.len(), cols.unwrap_or(0))));
        }
        cols = Some(record.len());
        for field in &record {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::format(path, offset, format!("row {}: {field:?} is not a number", rows + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(path, 0, "empty matrix"))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn format_matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, &name(path))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_bytes(path, format_matrix_csv(m).as_bytes())
}

/// Crop list with an `image_index,x,y,w,h` header.
pub fn format_crops_csv(crops: &[Crop]) -> String {
    let mut out = String::from("image_index,x,y,w,h\n");
    for c in crops {
        out.push_str(&format!("{},{},{},{},{}\n", c.image_index, c.x, c.y, c.width, c.height));
    }
    out
}

pub fn write_crops_csv(path: &Path, crops: &[Crop]) -> Result<()> {
    write_bytes(path, format_crops_csv(crops).as_bytes())
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)));
    paths.sort();
    Ok(paths)
}

/// Frames of every `.pgm` in `dir`, in lexicographic filename order, as raw
/// sample levels.
pub fn read_depth_dir(dir: &Path) -> Result<DepthClip> {
    let frames = sorted_entries(dir, "pgm")?
        .iter()
        .map(|p| {
            let pnm = read_pnm(p)?;
            if pnm.channels != 1 {
                return Err(Error::format(name(p), 0, "depth frames must be P5"));
            }
            DepthMap::new(pnm.width, pnm.height, pnm.samples.iter().map(|&s| s as f64).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::invalid(format!("no .pgm frames in {}", dir.display())));
    }
    DepthClip::new(frames)
}

/// Writes a depth raster as PGM with samples rounded to integers; 16-bit
/// samples are used when any value exceeds 255.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let samples: Vec<u16> = depth
        .data()
        .iter()
        .map(|&v| v.round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let maxval = if samples.iter().any(|&s| s > 255) { u16::MAX } else { 255 };
    write_pnm(
        path,
        &Pnm {
            width: depth.width(),
            height: depth.height(),
            channels: 1,
            maxval,
            samples,
        },
    )
}

/// Writes frames as `frame_00000.pgm`, ... into `dir`, creating it.
pub fn write_depth_dir(dir: &Path, clip: &DepthClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames().iter().enumerate() {
        write_depth(&dir.join(format!("frame_{i:05}.pgm")), f)?;
    }
    Ok(())
}

/// Stores `U.csv`, `W.csv`, `V.csv` and `meta.txt` in `dir`.
pub fn save_factorization(dir: &Path, f: &Factorization) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix_csv(&dir.join("U.csv"), &f.u)?;
    write_matrix_csv(&dir.join("W.csv"), &f.w)?;
    write_matrix_csv(&dir.join("V.csv"), &f.v)?;
    let objective = f.objective_trace.last().copied().unwrap_or(f64::NAN);
    let meta = format!(
        "d = {}\neta = {}\niterations = {}\nobjective = {}\n",
        f.rank(),
        f.eta,
        f.iterations(),
        objective
    );
    write_bytes(&dir.join("meta.txt"), meta.as_bytes())
}

/// Loads a factorization directory. The trace holds only the final
/// objective.
pub fn load_factorization(dir: &Path) -> Result<Factorization> {
    let u = read_matrix_csv(&dir.join("U.csv"))?;
    let w = read_matrix_csv(&dir.join("W.csv"))?;
    let v = read_matrix_csv(&dir.join("V.csv"))?;
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut eta = None;
    let mut objective = None;
    for (idx, line) in meta.lines().enumerate() {
        let Some((k, val)) = line.split_once('=') else { continue };
        let parse = |what: &str| -> Result<f64> {
            val.trim().parse().map_err(|_| {
                Error::format(name(&meta_path), 0, format!("line {}: bad {what} {:?}", idx + 1, val.trim()))
            })
        };
        match k.trim() {
            "eta" => eta = Some(parse("eta")?),
            "objective" => objective = Some(parse("objective")?),
            _ => {}
        }
    }
    let eta = eta.ok_or_else(|| Error::format(name(&meta_path), 0, "missing eta"))?;
    if u.ncols() != v.nrows() || w.ncols() != v.nrows() {
        return Err(Error::shape(
            format!("U and W with {} columns", v.nrows()),
            format!("{} and {}", u.ncols(), w.ncols()),
        ));
    }
    Ok(Factorization {
        u,
        w,
        v,
        eta,
        objective_trace: objective.into_iter().collect(),
    })
}
