//! File formats: PFM depth, Middlebury `.flo` flow, binary PGM masks,
//! camera JSON, parameter checkpoints, PLY point clouds and the loss log.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::flow::BinaryMask;
use crate::geometry::CameraFrame;
use crate::losses::LossBreakdown;
use crate::raster::Raster;
use crate::sceneflow::{EncodingConfig, NetConfig};

const FLO_MAGIC: f32 = 202021.25;

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn token(&mut self, path: &Path) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(path, "truncated header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::format(path, "header is not ASCII"))
    }

    fn number<T: std::str::FromStr>(&mut self, path: &Path) -> Result<T> {
        let t = self.token(path)?;
        t.parse().map_err(|_| Error::format(path, format!("bad header value {t:?}")))
    }

    /// Position after the single whitespace byte that ends the header.
    fn body(&self) -> usize {
        self.pos + 1
    }
}

pub fn write_pfm(path: &Path, r: &Raster<f64>) -> Result<()> {
    let (w, h) = (r.width(), r.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(r.get(x, y) as f32).to_le_bytes());
        }
    }
    Ok(fs::write(path, out)?)
}

pub fn read_pfm(path: &Path) -> Result<Raster<f64>> {
    let bytes = fs::read(path)?;
    let mut hd = Header { bytes: &bytes, pos: 0 };
    if hd.token(path)? != "Pf" {
        return Err(Error::format(path, "not a single-channel PFM"));
    }
    let w: usize = hd.number(path)?;
    let h: usize = hd.number(path)?;
    let scale: f64 = hd.number(path)?;
    let body = &bytes[hd.body().min(bytes.len())..];
    if w == 0 || h == 0 || body.len() != w * h * 4 {
        return Err(Error::format(path, format!("expected {w}x{h} floats, found {} bytes", body.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; w * h];
    for (k, c) in body.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, row) = (k % w, k / w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Raster::from_vec(w, h, data)
}

pub fn write_flo(path: &Path, r: &Raster<[f64; 2]>) -> Result<()> {
    let mut out = Vec::with_capacity(12 + r.len() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(r.width() as i32).to_le_bytes());
    out.extend_from_slice(&(r.height() as i32).to_le_bytes());
    for v in r.data() {
        out.extend_from_slice(&(v[0] as f32).to_le_bytes());
        out.extend_from_slice(&(v[1] as f32).to_le_bytes());
    }
    Ok(fs::write(path, out)?)
}

pub fn read_flo(path: &Path) -> Result<Raster<[f64; 2]>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |k: usize| [bytes[4 * k], bytes[4 * k + 1], bytes[4 * k + 2], bytes[4 * k + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::format(path, "bad magic number"));
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("bad size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + w * h * 8 {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let data = (0..w * h)
        .map(|k| {
            [
                f32::from_le_bytes(word(3 + 2 * k)) as f64,
                f32::from_le_bytes(word(4 + 2 * k)) as f64,
            ]
        })
        .collect();
    Raster::from_vec(w, h, data)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Structural("PGM pixel count does not match size".into()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(fs::write(path, out)?)
}

pub fn read_pgm(path: &Path) -> Result<Raster<f64>> {
    let bytes = fs::read(path)?;
    let mut hd = Header { bytes: &bytes, pos: 0 };
    if hd.token(path)? != "P5" {
        return Err(Error::format(path, "not a binary PGM"));
    }
    let w: usize = hd.number(path)?;
    let h: usize = hd.number(path)?;
    let max: usize = hd.number(path)?;
    if max == 0 || max > 255 {
        return Err(Error::format(path, "only 8-bit PGM is supported"));
    }
    let body = &bytes[hd.body().min(bytes.len())..];
    if w == 0 || h == 0 || body.len() != w * h {
        return Err(Error::format(path, "payload size does not match header"));
    }
    Raster::from_vec(w, h, body.iter().map(|&b| b as f64).collect())
}

/// Mask as PGM: set pixels are 255, others 0.
pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = m.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm(path, m.width(), m.height(), &px)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let r = read_pgm(path)?;
    BinaryMask::from_vec(r.width(), r.height(), r.data().iter().map(|&v| v > 127.0).collect())
}

/// Min-max normalized 8-bit view of a raster.
pub fn write_pgm_normalized(path: &Path, r: &Raster<f64>) -> Result<()> {
    let finite = r.data().iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px: Vec<u8> = r
        .data()
        .iter()
        .map(|&v| if v.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    write_pgm(path, r.width(), r.height(), &px)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraRecord {
    #[serde(rename = "K")]
    k: [[f64; 3]; 3],
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
    width: usize,
    height: usize,
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]])
}

fn matrix(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

/// Camera list as a JSON array of `{K, R, t, width, height}`; `R` and `t`
/// are camera-to-world.
pub fn write_cameras(path: &Path, frames: &[CameraFrame]) -> Result<()> {
    let recs: Vec<CameraRecord> = frames
        .iter()
        .map(|f| CameraRecord {
            k: rows(&f.k),
            r: rows(&f.r),
            t: [f.t.x, f.t.y, f.t.z],
            width: f.width,
            height: f.height,
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&recs)?;
    s.push('\n');
    Ok(fs::write(path, s)?)
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraFrame>> {
    let recs: Vec<CameraRecord> =
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    recs.iter()
        .enumerate()
        .map(|(i, c)| CameraFrame::new(matrix(&c.k), matrix(&c.r), Vector3::from(c.t), c.width, c.height, i))
        .collect()
}

/// Model description stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub encoding: Option<EncodingConfig>,
    pub net: Option<NetConfig>,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    len: usize,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    meta: CheckpointMeta,
    step: u64,
    blocks: Vec<BlockHeader>,
}

const CHECKPOINT_FORMAT: &str = "flowdepth-params-v1";

/// Layout: u32 LE header length, JSON header, then for every block its
/// values, first and second Adam moments as f64 LE.
pub fn write_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        meta: meta.clone(),
        step: store.step(),
        blocks: (0..store.num_blocks())
            .map(|b| BlockHeader {
                name: store.name(b).to_string(),
                len: store.block(b).len(),
                steps: store.block_steps(b),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for b in 0..store.num_blocks() {
        let (m, v) = store.moments(b);
        for x in store.block(b).iter().chain(m).chain(v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::format(path, "truncated checkpoint"));
    }
    let n = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let json = bytes.get(4..4 + n).ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::format(path, e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::format(path, format!("unknown format {:?}", header.format)));
    }
    let body = &bytes[4 + n..];
    let total: usize = header.blocks.iter().map(|b| 3 * b.len).sum();
    if body.len() != total * 8 {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let mut vals = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]));
    let mut store = ParamStore::new();
    for b in &header.blocks {
        let mut take = || -> Vec<f64> { vals.by_ref().take(b.len).collect() };
        let (x, m, v) = (take(), take(), take());
        let id = store.add_block(b.name.clone(), x);
        store.set_moments(id, m, v, b.steps)?;
    }
    store.set_step(header.step);
    Ok((store, header.meta))
}

/// ASCII PLY with one `x y z` vertex per point.
pub fn write_ply(path: &Path, points: &[[f64; 3]]) -> Result<()> {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    Ok(fs::write(path, s)?)
}

pub fn read_ply(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path)?;
    let (head, body) = text
        .split_once("end_header\n")
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let n: usize = head
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "missing vertex count"))?;
    let pts = body
        .lines()
        .take(n)
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if v.len() == 3 {
                Ok([v[0], v[1], v[2]])
            } else {
                Err(Error::format(path, format!("bad vertex line {l:?}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if pts.len() != n {
        return Err(Error::format(path, "fewer vertices than declared"));
    }
    Ok(pts)
}

pub const LOSS_LOG_HEADER: &str = "step,epoch,l2d,ldisp,lprior,lstatic,total";

pub fn loss_log_row(step: usize, epoch: usize, l: &LossBreakdown) -> String {
    format!(
        "{step},{epoch},{},{},{},{},{}",
        l.l2d, l.ldisp, l.lprior, l.lstatic, l.total
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_rows_are_bottom_to_top() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let r = Raster::from_fn(2, 2, |x, y| (x + 10 * y) as f64);
        write_pfm(&p, &r).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"Pf\n2 2\n-1.0\n".len();
        let first = f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap());
        assert_eq!(first, 10.0);
        assert_eq!(read_pfm(&p).unwrap(), r);
    }

    #[test]
    fn flo_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.flo");
        fs::write(&p, [0u8; 20]).unwrap();
        assert!(matches!(read_flo(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let mut b = b"P5\n# note\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[0, 255]);
        fs::write(&p, b).unwrap();
        let m = read_mask(&p).unwrap();
        assert_eq!(m.data(), &[false, true]);
    }

    #[test]
    fn checkpoint_keeps_moments_and_steps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut s = ParamStore::new();
        let a = s.add_block("a", vec![1.0, 2.0]);
        s.add_block("b", vec![3.0]);
        let mut g = crate::autodiff::Gradients::empty(2);
        g.set(a, vec![0.5, -0.5]);
        s.adam_step(&g, 0.1).unwrap();
        let meta = CheckpointMeta {
            epoch: 3,
            ..Default::default()
        };
        write_checkpoint(&p, &s, &meta).unwrap();
        let (t, m) = read_checkpoint(&p).unwrap();
        assert_eq!(t, s);
        assert_eq!(m, meta);
    }
}
