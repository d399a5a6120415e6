//! `HSIC` cube files and raw-cube conversion.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "HSIC"  u8 version=1  u32 rows  u32 cols  u32 bands  u32 classes
//! f32 × rows·cols·bands      values, band fastest
//! u16 × rows·cols            labels, 0 = unlabeled
//! [u32 len, len bytes]       optional UTF-8 class names, ';'-separated
//! u32                        CRC-32 of every byte after the magic
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const CUBE_VERSION: u8 = 1;
/// Magic, version and the four extent words.
pub const CUBE_HEADER_LEN: usize = 4 + 1 + 16;

/// An `rows × cols` raster of `bands`-long spectra with per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub classes: usize,
    /// Row-major, band fastest.
    pub values: Vec<f32>,
    /// `0` = unlabeled, `1..=classes` otherwise.
    pub labels: Vec<u16>,
    pub class_names: Option<Vec<String>>,
}

impl HsiCube {
    pub fn new(
        rows: usize,
        cols: usize,
        bands: usize,
        classes: usize,
        values: Vec<f32>,
        labels: Vec<u16>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let cube = Self {
            rows,
            cols,
            bands,
            classes,
            values,
            labels,
            class_names,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        let pixels = self.rows * self.cols;
        if self.values.len() != pixels * self.bands {
            return Err(Error::Shape {
                op: "cube",
                axis: "values",
                expected: pixels * self.bands,
                found: self.values.len(),
            });
        }
        if self.labels.len() != pixels {
            return Err(Error::Shape {
                op: "cube",
                axis: "labels",
                expected: pixels,
                found: self.labels.len(),
            });
        }
        if self.classes > u16::MAX as usize {
            return Err(Error::config(format!("{} classes exceed u16 labels", self.classes)));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize > self.classes) {
            return Err(Error::Label {
                label: bad as usize,
                classes: self.classes,
            });
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.classes {
                return Err(Error::config(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.classes
                )));
            }
            if names.iter().any(|n| n.contains(';')) {
                return Err(Error::config("class names may not contain ';'"));
            }
        }
        Ok(())
    }

    pub fn pixel(&self, i: usize, j: usize) -> usize {
        i * self.cols + j
    }

    pub fn spectrum(&self, i: usize, j: usize) -> &[f32] {
        let p = self.pixel(i, j);
        &self.values[p * self.bands..(p + 1) * self.bands]
    }

    pub fn label(&self, i: usize, j: usize) -> u16 {
        self.labels[self.pixel(i, j)]
    }

    /// Flat indices of every labeled pixel.
    pub fn labeled_pixels(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&p| self.labels[p] != 0).collect()
    }

    /// Pixel count per class, index 0 = class 1.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            if l != 0 {
                h[l as usize - 1] += 1;
            }
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CUBE_HEADER_LEN + self.values.len() * 4 + self.labels.len() * 2 + 4);
        out.extend_from_slice(CUBE_MAGIC);
        out.push(CUBE_VERSION);
        for v in [self.rows, self.cols, self.bands, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        if let Some(names) = &self.class_names {
            let text = names.join(";");
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CUBE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "missing HSIC magic".into(),
            });
        }
        if bytes.len() < CUBE_HEADER_LEN + 4 {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: "file shorter than the fixed header".into(),
            });
        }
        verify_crc(bytes)?;
        if bytes[4] != CUBE_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {}", bytes[4]),
            });
        }
        let mut r = Reader::new(&bytes[..bytes.len() - 4], 5);
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let bands = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let pixels = rows
            .checked_mul(cols)
            .ok_or_else(|| r.error("pixel count overflows"))?;
        let n_values = pixels
            .checked_mul(bands)
            .ok_or_else(|| r.error("value count overflows"))?;
        let values = r
            .take(n_values.checked_mul(4).ok_or_else(|| r.error("value count overflows"))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = r
            .take(pixels * 2)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let class_names = if r.remaining() > 0 {
            let len = r.u32()? as usize;
            let at = r.pos;
            let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format {
                offset: at,
                msg: format!("class names are not UTF-8: {e}"),
            })?;
            Some(if text.is_empty() && classes == 0 {
                Vec::new()
            } else {
                text.split(';').map(str::to_owned).collect()
            })
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes before checksum"));
        }
        Self::new(rows, cols, bands, classes, values, labels, class_names)
    }
}

pub(crate) fn verify_crc(bytes: &[u8]) -> Result<()> {
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(&body[4..]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(())
}

/// Little-endian cursor that reports failures with byte offsets.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    pub fn error(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(&format!("need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cube.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    HsiCube::from_bytes(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawType {
    U8,
    I16,
    U16,
    F32,
    F64,
}

impl RawType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "u8" | "uint8" => Self::U8,
            "i16" | "int16" => Self::I16,
            "u16" | "uint16" => Self::U16,
            "f32" | "float32" => Self::F32,
            "f64" | "float64" => Self::F64,
            _ => return Err(Error::config(format!("unknown data type `{s}`"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! read {
            ($t:ty) => {{
                let a = b.try_into().unwrap();
                if big_endian {
                    <$t>::from_be_bytes(a) as f64
                } else {
                    <$t>::from_le_bytes(a) as f64
                }
            }};
        }
        match self {
            Self::U8 => b[0] as f64,
            Self::I16 => read!(i16),
            Self::U16 => read!(u16),
            Self::F32 => read!(f32),
            Self::F64 => read!(f64),
        }
    }
}

/// Sidecar description of an externally prepared raw cube.
///
/// Plain `key = value` lines, `#` starts a comment:
///
/// ```text
/// rows = 145
/// cols = 145
/// bands = 200
/// classes = 16
/// data_file = indian_pines.raw     # relative to the header
/// data_type = f32                  # u8 | i16 | u16 | f32 | f64
/// interleave = bip                 # bip (band fastest) | bil | bsq
/// byte_order = little              # little | big
/// labels_file = indian_pines_gt.raw
/// labels_type = u8                 # u8 | u16
/// class_names = Alfalfa;Corn-notill;...   # optional
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct RawHeader {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub classes: usize,
    pub data_file: PathBuf,
    pub data_type: RawType,
    pub interleave: String,
    pub big_endian: bool,
    pub labels_file: PathBuf,
    pub labels_type: RawType,
    pub class_names: Option<Vec<String>>,
}

impl RawHeader {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("header line {}: expected `key = value`", n + 1)))?;
            kv.insert(k.trim().to_ascii_lowercase(), v.trim().to_owned());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::config(format!("header is missing `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(format!("header `{k}` is not an integer")))
        };
        let interleave = kv.get("interleave").map_or("bip", String::as_str).to_ascii_lowercase();
        if !matches!(interleave.as_str(), "bip" | "bil" | "bsq") {
            return Err(Error::config(format!("unknown interleave `{interleave}`")));
        }
        let big_endian = match kv.get("byte_order").map_or("little", String::as_str) {
            "little" => false,
            "big" => true,
            other => return Err(Error::config(format!("unknown byte_order `{other}`"))),
        };
        Ok(Self {
            rows: num("rows")?,
            cols: num("cols")?,
            bands: num("bands")?,
            classes: num("classes")?,
            data_file: base.join(get("data_file")?),
            data_type: RawType::parse(kv.get("data_type").map_or("f32", String::as_str))?,
            interleave,
            big_endian,
            labels_file: base.join(get("labels_file")?),
            labels_type: RawType::parse(kv.get("labels_type").map_or("u16", String::as_str))?,
            class_names: kv
                .get("class_names")
                .map(|s| s.split(';').map(|n| n.trim().to_owned()).collect()),
        })
    }
}

/// Reads a raw cube described by a sidecar header into an [`HsiCube`].
pub fn convert_raw(header_path: impl AsRef<Path>) -> Result<HsiCube> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let base = header_path.parent().unwrap_or(Path::new("."));
    let h = RawHeader::parse(&text, base)?;
    let data = fs::read(&h.data_file).map_err(|e| Error::io(&h.data_file, e))?;
    let labels_raw = fs::read(&h.labels_file).map_err(|e| Error::io(&h.labels_file, e))?;

    let (rows, cols, bands) = (h.rows, h.cols, h.bands);
    let size = h.data_type.size();
    let expected = rows * cols * bands * size;
    if data.len() != expected {
        return Err(Error::Format {
            offset: data.len().min(expected),
            msg: format!("data file holds {} bytes, header implies {expected}", data.len()),
        });
    }
    let mut values = vec![0f32; rows * cols * bands];
    for i in 0..rows {
        for j in 0..cols {
            for b in 0..bands {
                let src = match h.interleave.as_str() {
                    "bip" => (i * cols + j) * bands + b,
                    "bil" => (i * bands + b) * cols + j,
                    _ => (b * rows + i) * cols + j,
                };
                values[(i * cols + j) * bands + b] =
                    h.data_type.decode(&data[src * size..(src + 1) * size], h.big_endian) as f32;
            }
        }
    }
    let lsize = h.labels_type.size();
    if labels_raw.len() != rows * cols * lsize || !matches!(h.labels_type, RawType::U8 | RawType::U16) {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "labels file holds {} bytes, expected {} {:?} labels",
                labels_raw.len(),
                rows * cols,
                h.labels_type
            ),
        });
    }
    let labels = labels_raw
        .chunks_exact(lsize)
        .map(|c| h.labels_type.decode(c, h.big_endian) as u16)
        .collect();
    HsiCube::new(rows, cols, bands, h.classes, values, labels, h.class_names)
}
