//! File formats: binary PGM (P5, 8/16-bit), Middlebury `.flo`, JSON config
//! and CSV reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cbct_update::{ProbeProfile, TransferParams};
use crate::confidence::ConfidenceParams;
use crate::error::{Error, Result};
use crate::flow::{EnergyWeights, PyramidSpec};
use crate::grid::{FlowField, Image2D, Mask2D};
use crate::registration::LC2Params;

fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(with_path(path))
}

fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(with_path(path))
}

// ---------------------------------------------------------------------------
// PGM

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        message: message.into(),
    })
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return if start == self.buf.len() {
                parse_err(start, format!("header ends before {what}"))
            } else {
                parse_err(start, format!("expected decimal {what}"))
            };
        }
        let text = std::str::from_utf8(&self.buf[start..self.pos]).expect("ascii digits");
        match text.parse::<u32>() {
            Ok(v) => Ok(v),
            Err(_) => parse_err(start, format!("{what} out of range")),
        }
    }
}

/// Decodes a P5 file; intensities become `value / maxval`.
pub fn decode_pgm(buf: &[u8]) -> Result<Image2D> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return parse_err(0, "missing P5 magic");
    }
    let mut hd = Header { buf, pos: 2 };
    let width = hd.number("width")?;
    let height = hd.number("height")?;
    let maxval_at = {
        hd.skip_space();
        hd.pos
    };
    let maxval = hd.number("maxval")?;
    if width == 0 || height == 0 {
        return parse_err(2, format!("empty image {width}x{height}"));
    }
    let bytes_per = match maxval {
        255 => 1,
        65535 => 2,
        0 => return parse_err(maxval_at, "maxval must be positive"),
        v => return Err(Error::UnsupportedMaxval(v)),
    };
    if hd.pos >= buf.len() || !buf[hd.pos].is_ascii_whitespace() {
        return parse_err(hd.pos, "expected a single whitespace byte after maxval");
    }
    let start = hd.pos + 1;
    let n = width as usize * height as usize;
    let need = n * bytes_per;
    let payload = &buf[start..];
    if payload.len() < need {
        return parse_err(
            buf.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        );
    }
    if payload.len() > need {
        return parse_err(start + need, "trailing bytes after payload");
    }
    let scale = 1.0 / maxval as f64;
    let data = if bytes_per == 1 {
        payload.iter().map(|&b| b as f64 * scale).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    };
    Image2D::new(width as usize, height as usize, data)
}

pub fn encode_pgm(img: &Image2D, depth: BitDepth) -> Vec<u8> {
    let maxval = depth.maxval();
    let mut out = format!("P5\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    let m = maxval as f64;
    for &v in img.data() {
        let q = (v * m).round() as u32;
        match depth {
            BitDepth::Eight => out.push(q as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<Image2D> {
    decode_pgm(&read_bytes(path)?)
}

pub fn write_pgm(path: &Path, img: &Image2D, depth: BitDepth) -> Result<()> {
    write_bytes(path, encode_pgm(img, depth))
}

/// Masks are thresholded at 0.5 on read.
pub fn read_mask(path: &Path) -> Result<Mask2D> {
    let img = read_pgm(path)?;
    Mask2D::new(img.width(), img.height(), img.data().iter().map(|&v| v >= 0.5).collect())
}

pub fn write_mask(path: &Path, mask: &Mask2D) -> Result<()> {
    let img = Image2D::new(
        mask.width(),
        mask.height(),
        mask.data().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )?;
    write_pgm(path, &img, BitDepth::Eight)
}

// ---------------------------------------------------------------------------
// .flo

const FLO_MAGIC: [u8; 4] = *b"PIEH";
const FLO_HEADER: usize = 12;

/// Decodes a `.flo` file: magic `202021.25` (bytes `PIEH`), little-endian
/// `i32` width and height, then interleaved `f32` `(u, v)` pairs row-major.
pub fn decode_flo(buf: &[u8]) -> Result<FlowField> {
    if buf.len() < 4 {
        return parse_err(buf.len(), "file ends inside the magic number");
    }
    if buf[..4] != FLO_MAGIC {
        let got = f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
        return parse_err(0, format!("bad magic {got} (expected 202021.25)"));
    }
    if buf.len() < FLO_HEADER {
        return parse_err(buf.len(), "file ends inside the header");
    }
    let int = |at: usize| i32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]]);
    let (w, h) = (int(4), int(8));
    if w <= 0 || h <= 0 {
        return parse_err(4, format!("invalid dimensions {w}x{h}"));
    }
    let n = w as usize * h as usize;
    let need = n * 8;
    let payload = &buf[FLO_HEADER..];
    if payload.len() < need {
        return parse_err(
            buf.len(),
            format!(
                "truncated payload: header says {w}x{h} but only {} vectors present",
                payload.len() / 8
            ),
        );
    }
    if payload.len() > need {
        return parse_err(FLO_HEADER + need, "trailing bytes after payload");
    }
    let mut data = Vec::with_capacity(n);
    for (k, c) in payload.chunks_exact(8).enumerate() {
        let u = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        let v = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
        if !(u.is_finite() && v.is_finite()) {
            return parse_err(FLO_HEADER + 8 * k, "non-finite flow vector");
        }
        data.push([u as f64, v as f64]);
    }
    FlowField::new(w as usize, h as usize, data)
}

/// Components are stored as `f32`.
pub fn encode_flo(f: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(FLO_HEADER + 8 * f.len());
    out.extend_from_slice(&FLO_MAGIC);
    out.extend_from_slice(&(f.width() as i32).to_le_bytes());
    out.extend_from_slice(&(f.height() as i32).to_le_bytes());
    for v in f.data() {
        out.extend_from_slice(&(v[0] as f32).to_le_bytes());
        out.extend_from_slice(&(v[1] as f32).to_le_bytes());
    }
    out
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&read_bytes(path)?)
}

pub fn write_flo(path: &Path, f: &FlowField) -> Result<()> {
    write_bytes(path, encode_flo(f))
}

// ---------------------------------------------------------------------------
// config

/// Every tunable block; missing blocks take their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub energy: EnergyWeights,
    pub pyramid: PyramidSpec,
    pub confidence: ConfidenceParams,
    pub lc2: LC2Params,
    pub transfer: TransferParams,
    pub probe: Option<ProbeProfile>,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        self.pyramid.validate()?;
        self.confidence.validate()?;
        self.lc2.validate()?;
        self.transfer.validate()?;
        if let Some(p) = &self.probe {
            if !(p.sigma_probe > 0.0 && p.d_robot >= 0.0 && p.c_x.is_finite()) {
                return Err(Error::InvalidArgument(format!("invalid probe profile: {p:?}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Reads any JSON document into `T`, reporting failures as config errors.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_bytes(path, text + "\n")
}

// ---------------------------------------------------------------------------
// CSV

/// Header line plus one line per row.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut s = String::with_capacity(header.len() + 1 + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    write_bytes(path, s)
}
