//! File formats: PGM images, point CSVs, metrics CSVs and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::metrics::MetricsRow;
use crate::denoiser::{AdamState, DenoiserParams};
use crate::error::{Error, Result};
use crate::numerics::{PointSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSDM";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: [&str; 11] = [
    "run_id",
    "seed",
    "iteration",
    "loss_dif",
    "loss_ddc",
    "loss_style",
    "center_drift",
    "rotation_deg",
    "structure_corr",
    "scs_proxy",
    "diversity",
];
/// Largest image side accepted by the PGM reader.
const MAX_PGM_SIDE: usize = 4096;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Binary 8-bit PGM of a `[1, H, W]` or `[H, W]` image in `[-1, 1]`.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidArgument(format!(
                "PGM needs a single-channel image, got {s:?}"
            )))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| pixel(v)));
    Ok(out)
}

/// Reads a binary PGM with maxval 255 into a `[1, H, W]` image.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P5") {
        return Err(format_err("PGM: missing P5 magic"));
    }
    pos += 2;
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *f = text.parse().map_err(|_| format_err("PGM: bad header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("PGM: header must end in whitespace"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(format!("PGM: maxval {maxval} unsupported, need 255")));
    }
    if w == 0 || h == 0 || w > MAX_PGM_SIDE || h > MAX_PGM_SIDE {
        return Err(format_err(format!("PGM: size {w}x{h} outside 1..={MAX_PGM_SIDE}")));
    }
    let body = &bytes[pos..];
    if body.len() != w * h {
        return Err(format_err(format!(
            "PGM: expected {} pixel bytes, found {}",
            w * h,
            body.len()
        )));
    }
    Tensor::new(vec![1, h, w], body.iter().map(|&p| p as f64 / 127.5 - 1.0).collect())
}

pub fn encode_points_csv(points: &PointSet) -> Result<String> {
    if points.dim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "point CSV holds 2-D points, got {}-D",
            points.dim()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y"]).map_err(csv_err)?;
    for p in points.points() {
        w.serialize((p[0], p[1])).map_err(csv_err)?;
    }
    into_string(w)
}

pub fn decode_points_csv(text: &str) -> Result<PointSet> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?;
    if header.iter().collect::<Vec<_>>() != ["x", "y"] {
        return Err(format_err("point CSV header must be x,y"));
    }
    let mut pts = Vec::new();
    for row in r.deserialize::<(f64, f64)>() {
        let (x, y) = row.map_err(csv_err)?;
        if !x.is_finite() || !y.is_finite() {
            return Err(format_err(format!("point CSV row {} is not finite", pts.len() + 1)));
        }
        pts.push(vec![x, y]);
    }
    if pts.is_empty() {
        return Err(format_err("point CSV has no rows"));
    }
    PointSet::new(pts)
}

fn csv_err(e: csv::Error) -> Error {
    format_err(format!("CSV: {e}"))
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| format_err(format!("CSV: {e}")))?;
    String::from_utf8(bytes).map_err(|e| format_err(e.to_string()))
}

pub fn encode_metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for row in rows {
        row.check_finite()?;
        w.serialize(row).map_err(csv_err)?;
    }
    into_string(w)
}

pub fn decode_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers().map_err(csv_err)?.iter().ne(METRICS_HEADER) {
        return Err(format_err("metrics CSV header mismatch"));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Parameters (and optionally optimizer state) together with the run config.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: DenoiserParams,
    pub adam: Option<AdamState>,
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("checkpoint truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| format_err("checkpoint size overflow"))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    /// Magic, version, config JSON, parameters, then `step, m, v` if an
    /// optimizer state is present. Integers and reals are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.len() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        put_f64s(&mut out, &self.params.values);
        if let Some(a) = &self.adam {
            out.extend_from_slice(&a.step.to_le_bytes());
            put_f64s(&mut out, &a.m);
            put_f64s(&mut out, &a.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(format_err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("checkpoint version {version} unsupported")));
        }
        let json_len = usize::try_from(c.u64("config length")?).map_err(|_| format_err("config length overflow"))?;
        let json = c.take(json_len, "config")?;
        let text = std::str::from_utf8(json).map_err(|_| format_err("config is not UTF-8"))?;
        let config = RunConfig::from_json(text)?;
        let total = config.denoiser()?.layout().total();
        let params = DenoiserParams {
            values: c.f64s(total, "parameters")?,
        };
        let adam = match c.remaining() {
            0 => None,
            _ => {
                let step = c.u64("optimizer step")?;
                let mut a = AdamState::new(total, config.train.lr);
                a.step = step;
                a.m = c.f64s(total, "optimizer moments")?;
                a.v = c.f64s(total, "optimizer moments")?;
                Some(a)
            }
        };
        if c.remaining() != 0 {
            return Err(format_err(format!("{} trailing bytes after checkpoint", c.remaining())));
        }
        Ok(Self { config, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes a batch of samples under `dir`: one PGM per image
/// (`sample_000.pgm`, ...) or a single `samples.csv` for points.
pub fn write_samples(dir: &Path, batch: &Tensor) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    if batch.ndim() == 2 {
        let path = dir.join("samples.csv");
        fs::write(&path, encode_points_csv(&PointSet::from_rows(batch)?)?)?;
        return Ok(vec![path]);
    }
    let mut paths = Vec::with_capacity(batch.shape()[0]);
    for i in 0..batch.shape()[0] {
        let path = dir.join(format!("sample_{i:03}.pgm"));
        fs::write(&path, encode_pgm(&batch.item(i)?)?)?;
        paths.push(path);
    }
    Ok(paths)
}
