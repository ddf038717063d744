//! File formats: annotation JSON, PFM/PGM/PPM rasters, overlays,
//! checkpoints, metrics logs, result tables and run manifests.
//!
//! Rasters are written row-major, top row first. PFM payloads are
//! little-endian (scale `-1.0`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{DensityMap, Grid, Mask, Point2};
use crate::model::{ChannelPlan, FeatureMap, ModelState};
use crate::targets::{HeadBox, SceneAnnotation};
use crate::trainer::EpochRecord;

pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "crowdprompt-checkpoint v1";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------- annotations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    schema_version: u32,
    scenes: Vec<SceneRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    id: usize,
    width: usize,
    height: usize,
    points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<[f64; 4]>>,
}

impl From<&SceneAnnotation> for SceneRecord {
    fn from(a: &SceneAnnotation) -> Self {
        Self {
            id: a.id,
            width: a.width,
            height: a.height,
            points: a.points.iter().map(|p| [p.x, p.y]).collect(),
            boxes: a
                .boxes
                .as_ref()
                .map(|bs| bs.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]).collect()),
        }
    }
}

impl From<SceneRecord> for SceneAnnotation {
    fn from(r: SceneRecord) -> Self {
        Self {
            id: r.id,
            width: r.width,
            height: r.height,
            points: r.points.iter().map(|&[x, y]| Point2::new(x, y)).collect(),
            boxes: r
                .boxes
                .map(|bs| bs.iter().map(|&[a, b, c, d]| HeadBox::new(a, b, c, d)).collect()),
        }
    }
}

pub fn annotations_to_json(scenes: &[SceneAnnotation]) -> Result<String> {
    let file = AnnotationFile {
        schema_version: ANNOTATION_SCHEMA_VERSION,
        scenes: scenes.iter().map(SceneRecord::from).collect(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Parse and validate an annotation document. `origin` only labels errors.
pub fn annotations_from_json(text: &str, origin: &Path) -> Result<Vec<SceneAnnotation>> {
    let file: AnnotationFile = serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => Error::schema("annotations", e.to_string()),
        _ => parse_err(origin, e.to_string()),
    })?;
    if file.schema_version != ANNOTATION_SCHEMA_VERSION {
        return Err(Error::schema(
            "schema_version",
            format!("expected {ANNOTATION_SCHEMA_VERSION}, found {}", file.schema_version),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(file.scenes.len());
    for (i, rec) in file.scenes.into_iter().enumerate() {
        if !seen.insert(rec.id) {
            return Err(Error::schema(
                format!("scenes[{i}].id"),
                format!("duplicate id {}", rec.id),
            ));
        }
        let ann = SceneAnnotation::from(rec);
        ann.validate()?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, scenes: &[SceneAnnotation]) -> Result<()> {
    let mut text = annotations_to_json(scenes)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_annotations(path: &Path) -> Result<Vec<SceneAnnotation>> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| parse_err(path, e.to_string()))?;
    annotations_from_json(text, path)
}

// ---------------------------------------------------------------- rasters

/// Split a netpbm-style header of `fields` whitespace-separated tokens.
/// Returns the tokens and the payload offset (one whitespace byte after the
/// last token).
fn header_tokens<'a>(bytes: &'a [u8], fields: usize, path: &Path) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(fields);
    let mut i = 0;
    while tokens.len() < fields {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(parse_err(path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| parse_err(path, "non-ascii header"))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(parse_err(path, "missing payload"));
    }
    Ok((tokens, i + 1))
}

fn parse_dims(tokens: &[&str], path: &Path) -> Result<(usize, usize)> {
    let num = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| parse_err(path, format!("bad dimension '{s}'")))
    };
    Ok((num(tokens[1])?, num(tokens[2])?))
}

fn pfm_bytes(magic: &str, width: usize, height: usize, values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn parse_pfm(bytes: &[u8], path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<f32>)> {
    let (tokens, offset) = header_tokens(bytes, 4, path)?;
    if tokens[0] != magic {
        return Err(parse_err(path, format!("expected magic {magic}, found {}", tokens[0])));
    }
    let (w, h) = parse_dims(&tokens, path)?;
    let scale: f64 = tokens[3].parse().map_err(|_| parse_err(path, "bad scale"))?;
    if scale >= 0.0 {
        return Err(parse_err(path, "only little-endian PFM (negative scale) is supported"));
    }
    let payload = &bytes[offset..];
    if payload.len() != w * h * channels * 4 {
        return Err(parse_err(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), w * h * channels * 4),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((w, h, values))
}

/// Grayscale PFM, 32-bit floats.
pub fn density_to_pfm(y: &DensityMap) -> Result<Vec<u8>> {
    if let Some(i) = y.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("density value at index {i}")));
    }
    Ok(pfm_bytes("Pf", y.width(), y.height(), y.data().iter().copied()))
}

pub fn write_density_pfm(y: &DensityMap, path: &Path) -> Result<()> {
    write_bytes(path, &density_to_pfm(y)?)
}

pub fn read_density_pfm(path: &Path) -> Result<DensityMap> {
    let (w, h, v) = parse_pfm(&read_bytes(path)?, path, "Pf", 1)?;
    Grid::from_vec(w, h, v.into_iter().map(f64::from).collect())
}

/// Three-channel image as a color PFM (interleaved RGB).
pub fn write_image_pfm(image: &FeatureMap, path: &Path) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "color PFM needs 3 channels, got {}",
            image.channels
        )));
    }
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image value".into()));
    }
    let (h, w) = (image.height, image.width);
    let values = (0..h * w).flat_map(|i| (0..3).map(move |c| image.data[c * h * w + i]));
    write_bytes(path, &pfm_bytes("PF", w, h, values))
}

pub fn read_image_pfm(path: &Path) -> Result<FeatureMap> {
    let (w, h, v) = parse_pfm(&read_bytes(path)?, path, "PF", 3)?;
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in v.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = f64::from(px[c]);
        }
    }
    FeatureMap::from_vec(3, h, w, data)
}

pub fn mask_to_pgm(m: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn write_mask_pgm(m: &Mask, path: &Path) -> Result<()> {
    write_bytes(path, &mask_to_pgm(m))
}

/// Reads any 8-bit P5 file; nonzero pixels are foreground.
pub fn read_mask_pgm(path: &Path) -> Result<Mask> {
    let bytes = read_bytes(path)?;
    let (tokens, offset) = header_tokens(&bytes, 4, path)?;
    if tokens[0] != "P5" {
        return Err(parse_err(path, format!("expected P5, found {}", tokens[0])));
    }
    let (w, h) = parse_dims(&tokens, path)?;
    if tokens[3] != "255" {
        return Err(parse_err(path, "only maxval 255 is supported"));
    }
    let payload = &bytes[offset..];
    if payload.len() != w * h {
        return Err(parse_err(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), w * h),
        ));
    }
    Grid::from_vec(w, h, payload.iter().map(|&b| b != 0).collect())
}

/// RGB raster, one byte per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

pub fn rgb_to_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().flatten());
    out
}

pub fn read_ppm(path: &Path) -> Result<Rgb8> {
    let bytes = read_bytes(path)?;
    let (tokens, offset) = header_tokens(&bytes, 4, path)?;
    if tokens[0] != "P6" || tokens[3] != "255" {
        return Err(parse_err(path, "expected an 8-bit P6 file"));
    }
    let (w, h) = parse_dims(&tokens, path)?;
    let payload = &bytes[offset..];
    if payload.len() != 3 * w * h {
        return Err(parse_err(path, "payload size does not match header"));
    }
    Ok(Rgb8 {
        width: w,
        height: h,
        data: payload.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Pixels outside `m` with a 4-neighbor inside `m`.
pub fn mask_boundary(m: &Mask) -> Mask {
    let (w, h) = (m.width(), m.height());
    let mut out = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if *m.get(x, y) {
                continue;
            }
            let touches = (x > 0 && *m.get(x - 1, y))
                || (x + 1 < w && *m.get(x + 1, y))
                || (y > 0 && *m.get(x, y - 1))
                || (y + 1 < h && *m.get(x, y + 1));
            out.set(x, y, touches);
        }
    }
    out
}

/// Grayscale image with density as a red ramp (normalized by its maximum)
/// and the outer 4-neighbor boundary of `m` in pure green.
pub fn overlay(image: &Grid<f64>, y_hat: &DensityMap, m: &Mask) -> Result<Rgb8> {
    image.check_shape(y_hat)?;
    image.check_shape(m)?;
    let peak = y_hat.data().iter().copied().fold(0.0f64, f64::max);
    let boundary = mask_boundary(m);
    let data = (0..image.len())
        .map(|i| {
            if boundary.data()[i] {
                return [0, 255, 0];
            }
            let g = image.data()[i].clamp(0.0, 1.0);
            let d = if peak > 0.0 {
                (y_hat.data()[i] / peak).clamp(0.0, 1.0)
            } else {
                0.0
            };
            [
                to_byte(g + (1.0 - g) * d),
                to_byte(g * (1.0 - d)),
                to_byte(g * (1.0 - d)),
            ]
        })
        .collect();
    Ok(Rgb8 {
        width: image.width(),
        height: image.height(),
        data,
    })
}

pub fn render_overlay(image: &FeatureMap, y_hat: &DensityMap, m: &Mask, path: &Path) -> Result<()> {
    let img = overlay(&image.luminance(), y_hat, m)?;
    write_bytes(path, &rgb_to_ppm(&img))
}

// ---------------------------------------------------------------- checkpoints

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    plan: ChannelPlan,
    blocks: Vec<(String, Vec<usize>)>,
    num_params: usize,
}

/// Magic line, one JSON header line, then every parameter as a
/// little-endian f64.
pub fn checkpoint_bytes(state: &ModelState) -> Vec<u8> {
    let header = CheckpointHeader {
        plan: state.plan().clone(),
        blocks: state
            .layout()
            .iter()
            .map(|b| (b.name.clone(), b.shape.clone()))
            .collect(),
        num_params: state.num_params(),
    };
    let mut out = format!("{CHECKPOINT_MAGIC}\n").into_bytes();
    out.extend(serde_json::to_string(&header).expect("header serializes").into_bytes());
    out.push(b'\n');
    for p in state.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn write_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    write_bytes(path, &checkpoint_bytes(state))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = read_bytes(path)?;
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(CHECKPOINT_MAGIC.as_bytes()) {
        return Err(parse_err(path, "not a checkpoint (bad magic line)"));
    }
    let header: CheckpointHeader = serde_json::from_slice(lines.next().unwrap_or_default())
        .map_err(|e| parse_err(path, format!("checkpoint header: {e}")))?;
    let payload = lines.next().unwrap_or_default();
    if payload.len() != header.num_params * 8 {
        return Err(parse_err(
            path,
            format!(
                "payload holds {} bytes, header promises {} parameters",
                payload.len(),
                header.num_params
            ),
        ));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let state = ModelState::from_params(header.plan, params)?;
    let layout: Vec<(String, Vec<usize>)> = state
        .layout()
        .iter()
        .map(|b| (b.name.clone(), b.shape.clone()))
        .collect();
    if layout != header.blocks {
        return Err(Error::schema(
            "checkpoint.blocks",
            "layout does not match the channel plan",
        ));
    }
    Ok(state)
}

// ---------------------------------------------------------------- logs, tables

pub fn metrics_to_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn write_metrics(log: &[EpochRecord], path: &Path) -> Result<()> {
    write_bytes(path, metrics_to_jsonl(log).as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| parse_err(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Comma-separated table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        std::iter::once(&self.header)
            .chain(&self.rows)
            .map(|r| r.join(",") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_csv().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| parse_err(path, e.to_string()))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| parse_err(path, "empty table"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        if let Some(i) = rows.iter().position(|r| r.len() != header.len()) {
            return Err(parse_err(path, format!("row {} has the wrong number of fields", i + 1)));
        }
        Ok(Self { header, rows })
    }
}

// ---------------------------------------------------------------- manifest

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_lower(&Sha256::digest(bytes))
}

fn hex_lower(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, label: impl Into<String>) -> Result<Self> {
        Ok(Self {
            path: label.into(),
            sha256: sha256_hex(&read_bytes(path)?),
        })
    }
}

/// Self-description of one command's output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    /// Every file written under the output directory, by relative path.
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    /// Collect digests for `outputs` (relative to `out_dir`), sorted by path.
    pub fn build(
        command: &str,
        config_hash: &str,
        seed: u64,
        inputs: Vec<FileDigest>,
        out_dir: &Path,
        outputs: &[PathBuf],
    ) -> Result<Self> {
        let mut digests = outputs
            .iter()
            .map(|rel| FileDigest::of(&out_dir.join(rel), rel.to_string_lossy().replace('\\', "/")))
            .collect::<Result<Vec<_>>>()?;
        digests.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            inputs,
            outputs: digests,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_bytes(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        serde_json::from_slice(&bytes).map_err(|e| parse_err(path, e.to_string()))
    }
}

/// Create `path`'s parent directories and write `bytes`.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_bytes(path, bytes)
}
