//! Feature tensor container and dataset manifests.
//!
//! Tensors are stored as single-array `.npy` (version 1.0) files holding
//! little-endian `float32` data in C order with shape `(K, Y, X)`.

mod manifest;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use manifest::{load_manifest, DatasetManifest, GroundTruth, ManifestEntry, Traverse};

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const NPY_ALIGN: usize = 64;

/// A `K x Y x X` activation volume for one image, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    image_id: String,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    /// Builds a tensor, rejecting empty dimensions, a length mismatch and
    /// non-finite values.
    pub fn new(
        image_id: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Input(format!(
                "tensor dimensions must be positive, got ({channels}, {height}, {width})"
            )));
        }
        let expected = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Input("tensor shape overflows".into()))?;
        if data.len() != expected {
            return Err(Error::Input(format!(
                "tensor data has {} values, shape ({channels}, {height}, {width}) needs {expected}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data { index });
        }
        Ok(Self {
            image_id: image_id.into(),
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(image_id: impl Into<String>, channels: usize, height: usize, width: usize) -> Result<Self> {
        let len = channels.saturating_mul(height).saturating_mul(width);
        Self::new(image_id, channels, height, width, vec![0.0; len])
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    /// Returns a copy of the tensor under a different id.
    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(K, Y, X)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// One feature map, row-major `Y x X`.
    pub fn channel(&self, channel: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[channel * plane..(channel + 1) * plane]
    }

    /// The `K`-dimensional local descriptor stacked from every channel at
    /// one spatial location.
    pub fn local_descriptor(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.channels).map(|k| self.at(k, row, col)).collect()
    }
}

/// Reads a tensor file. The image id is the file stem.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_npy(&bytes, image_id)
}

/// Writes a tensor file that [`load_tensor`] reads back bit-exactly.
pub fn save_tensor(tensor: &FeatureTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_npy(tensor);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_npy(tensor: &FeatureTensor) -> Vec<u8> {
    let (k, y, x) = tensor.shape();
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({k}, {y}, {x}), }}"
    );
    // magic(6) + version(2) + header_len(2) + header + '\n'
    let unpadded = 10 + header.len() + 1;
    let padding = (NPY_ALIGN - unpadded % NPY_ALIGN) % NPY_ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + tensor.data.len() * 4);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_npy(bytes: &[u8], image_id: impl Into<String>) -> Result<FeatureTensor> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::Format("missing .npy magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::Format("truncated .npy header".into()));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
            (len, 12)
        }
        _ => {
            return Err(Error::Format(format!(
                "unsupported .npy version {major}.{minor}"
            )))
        }
    };
    let data_start = header_start + header_len;
    if bytes.len() < data_start {
        return Err(Error::Format("truncated .npy header".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|_| Error::Format("header is not valid text".into()))?;
    let header = NpyHeader::parse(header)?;

    if header.descr != "<f4" {
        return Err(Error::Format(format!(
            "dtype mismatch: expected '<f4', found '{}'",
            header.descr
        )));
    }
    if header.fortran_order {
        return Err(Error::Format("fortran-ordered arrays are not supported".into()));
    }
    let [k, y, x] = match header.shape[..] {
        [k, y, x] => [k, y, x],
        _ => {
            return Err(Error::Format(format!(
                "expected a 3-d shape (K, Y, X), found {:?}",
                header.shape
            )))
        }
    };
    if k == 0 || y == 0 || x == 0 {
        return Err(Error::Format(format!("empty shape ({k}, {y}, {x})")));
    }
    let count = k
        .checked_mul(y)
        .and_then(|n| n.checked_mul(x))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let payload = &bytes[data_start..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape ({k}, {y}, {x}) needs {}",
            payload.len(),
            count * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureTensor::new(image_id, k, y, x, data)
}

#[derive(Debug)]
struct NpyHeader {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl NpyHeader {
    /// Parses the python-literal dict numpy writes, e.g.
    /// `{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3, 4), }`.
    fn parse(text: &str) -> Result<Self> {
        let body = text
            .trim()
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| Error::Format("header is not a dict".into()))?;

        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;
        let mut rest = body.trim_start();
        while !rest.is_empty() {
            let (key, after_key) = take_quoted(rest)?;
            let after_colon = after_key
                .trim_start()
                .strip_prefix(':')
                .ok_or_else(|| Error::Format(format!("missing ':' after key '{key}'")))?
                .trim_start();
            let after_value = match key {
                "descr" => {
                    let (value, tail) = take_quoted(after_colon)?;
                    descr = Some(value.to_string());
                    tail
                }
                "fortran_order" => {
                    if let Some(tail) = after_colon.strip_prefix("False") {
                        fortran_order = Some(false);
                        tail
                    } else if let Some(tail) = after_colon.strip_prefix("True") {
                        fortran_order = Some(true);
                        tail
                    } else {
                        return Err(Error::Format("bad fortran_order value".into()));
                    }
                }
                "shape" => {
                    let inner = after_colon
                        .strip_prefix('(')
                        .ok_or_else(|| Error::Format("shape is not a tuple".into()))?;
                    let close = inner
                        .find(')')
                        .ok_or_else(|| Error::Format("unterminated shape tuple".into()))?;
                    let dims = inner[..close]
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            s.parse::<usize>()
                                .map_err(|_| Error::Format(format!("bad shape entry '{s}'")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    shape = Some(dims);
                    &inner[close + 1..]
                }
                other => return Err(Error::Format(format!("unexpected header key '{other}'"))),
            };
            rest = after_value.trim_start();
            rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
        }

        Ok(Self {
            descr: descr.ok_or_else(|| Error::Format("header lacks 'descr'".into()))?,
            fortran_order: fortran_order
                .ok_or_else(|| Error::Format("header lacks 'fortran_order'".into()))?,
            shape: shape.ok_or_else(|| Error::Format("header lacks 'shape'".into()))?,
        })
    }
}

fn take_quoted(s: &str) -> Result<(&str, &str)> {
    let quote = s
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::Format(format!("expected a quoted string at '{}'", truncate(s))))?;
    let inner = &s[1..];
    let end = inner
        .find(quote)
        .ok_or_else(|| Error::Format("unterminated string in header".into()))?;
    Ok((&inner[..end], &inner[end + 1..]))
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(16) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
