//! Binary file formats: single-tensor files ("TNSR") and checkpoints
//! ("TUCK"). Both are little-endian with fixed layouts, so files are
//! byte-identical across platforms.
//!
//! TensorFile layout:
//!   magic "TNSR" | version u16 | dtype u8 (1=f32, 2=f64) | ndim u8 |
//!   ndim × dim u32 | payload (row-major, little-endian)
//!
//! Checkpoint layout:
//!   magic "TUCK" | version u16 | entry count u32 |
//!   entries: name_len u16, UTF-8 name, embedded TensorFile body |
//!   CRC-32 (IEEE) of all preceding bytes, u32
//!
//! The first checkpoint entry is named `__config__` and stores the model
//! config JSON, one UTF-8 byte per payload element (so every entry is a
//! well-formed TensorFile).

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::TUnetParams;
use crate::synth::Sample;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TUCK";
pub const FORMAT_VERSION: u16 = 1;
const CONFIG_ENTRY: &str = "__config__";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8, offset: u64) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            _ => Err(Error::Format {
                offset,
                msg: format!("unknown dtype code {code}"),
            }),
        }
    }
}

// ── TensorFile ─────────────────────────────────────────────────────────

pub fn tensor_to_bytes(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * t.shape().len() + t.numel() * dtype.size());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(dtype as u8);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

/// Parse one embedded tensor starting at `*cursor`; `base` is the absolute
/// file offset of `bytes[0]`, so errors report file positions.
pub fn tensor_from_bytes(bytes: &[u8], cursor: &mut usize, base: u64) -> Result<Tensor> {
    let fail = |offset: usize, msg: String| Error::Format {
        offset: base + offset as u64,
        msg,
    };
    let need = |cursor: usize, n: usize| -> Result<()> {
        if cursor + n > bytes.len() {
            Err(fail(bytes.len(), "truncated tensor header".into()))
        } else {
            Ok(())
        }
    };

    let start = *cursor;
    need(start, 8)?;
    if &bytes[start..start + 4] != TENSOR_MAGIC {
        return Err(fail(start, format!("bad magic {:?}", &bytes[start..start + 4])));
    }
    let version = u16::from_le_bytes([bytes[start + 4], bytes[start + 5]]);
    if version != FORMAT_VERSION {
        return Err(fail(start + 4, format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[start + 6], base + start as u64 + 6)?;
    let ndim = bytes[start + 7] as usize;
    if ndim == 0 {
        return Err(fail(start + 7, "tensor has zero dimensions".into()));
    }
    need(start + 8, 4 * ndim)?;
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for i in 0..ndim {
        let o = start + 8 + 4 * i;
        let d = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        if d == 0 {
            return Err(fail(o, "zero-sized dimension".into()));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| fail(o, "dimension product overflows".into()))?;
        shape.push(d);
    }
    let payload_start = start + 8 + 4 * ndim;
    let payload_len = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| fail(payload_start, "payload length overflows".into()))?;
    if payload_start + payload_len > bytes.len() {
        return Err(fail(
            payload_start,
            format!(
                "truncated payload: {} elements declared, {} bytes available",
                numel,
                bytes.len() - payload_start
            ),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            for i in 0..numel {
                let o = payload_start + 4 * i;
                data.push(f32::from_le_bytes([
                    bytes[o],
                    bytes[o + 1],
                    bytes[o + 2],
                    bytes[o + 3],
                ]) as f64);
            }
        }
        Dtype::F64 => {
            for i in 0..numel {
                let o = payload_start + 8 * i;
                let mut b = [0u8; 8];
                b.copy_from_slice(&bytes[o..o + 8]);
                data.push(f64::from_le_bytes(b));
            }
        }
    }
    *cursor = payload_start + payload_len;
    Tensor::from_vec(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    fs::write(&path, tensor_to_bytes(t, dtype)).map_err(|e| Error::io(&path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut cursor = 0;
    let t = tensor_from_bytes(&bytes, &mut cursor, 0)?;
    if cursor != bytes.len() {
        return Err(Error::Format {
            offset: cursor as u64,
            msg: format!("{} trailing bytes after payload", bytes.len() - cursor),
        });
    }
    Ok(t)
}

// ── CRC-32 (IEEE 802.3 / zlib polynomial, reflected) ───────────────────

pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, e) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *e = c;
        }
        t
    });
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = (crc >> 8) ^ table[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}

// ── Checkpoint ─────────────────────────────────────────────────────────

fn config_to_tensor(cfg: &ModelConfig) -> Result<Tensor> {
    let json = serde_json::to_vec(cfg)?;
    let data: Vec<f64> = json.iter().map(|&b| b as f64).collect();
    Tensor::from_vec(vec![data.len()], data)
}

fn config_from_tensor(t: &Tensor, offset: u64) -> Result<ModelConfig> {
    let mut bytes = Vec::with_capacity(t.numel());
    for &v in t.data() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Format {
                offset,
                msg: format!("config entry holds non-byte value {v}"),
            });
        }
        bytes.push(v as u8);
    }
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Schema(format!("invalid embedded config: {e}")))
}

pub fn checkpoint_to_bytes(cfg: &ModelConfig, params: &TUnetParams, dtype: Dtype) -> Result<Vec<u8>> {
    let named = params.named_tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&((named.len() + 1) as u32).to_le_bytes());

    let write_entry = |buf: &mut Vec<u8>, name: &str, body: Vec<u8>| {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&body);
    };
    write_entry(
        &mut buf,
        CONFIG_ENTRY,
        tensor_to_bytes(&config_to_tensor(cfg)?, Dtype::F32),
    );
    for (name, tensor) in named {
        write_entry(&mut buf, &name, tensor_to_bytes(tensor, dtype));
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    params: &TUnetParams,
    dtype: Dtype,
) -> Result<()> {
    fs::write(&path, checkpoint_to_bytes(cfg, params, dtype)?).map_err(|e| Error::io(&path, e))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelConfig, TUnetParams)> {
    if bytes.len() < 14 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "file too short for a checkpoint".into(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes([
        bytes[bytes.len() - 4],
        bytes[bytes.len() - 3],
        bytes[bytes.len() - 2],
        bytes[bytes.len() - 1],
    ]);
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Integrity(format!(
            "checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }
    if &body[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", &body[0..4]),
        });
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = u32::from_le_bytes([body[6], body[7], body[8], body[9]]) as usize;
    let mut cursor = 10usize;
    let mut config: Option<ModelConfig> = None;
    let mut map: HashMap<String, Tensor> = HashMap::new();
    for i in 0..count {
        if cursor + 2 > body.len() {
            return Err(Error::Format {
                offset: cursor as u64,
                msg: "truncated entry name length".into(),
            });
        }
        let name_len = u16::from_le_bytes([body[cursor], body[cursor + 1]]) as usize;
        cursor += 2;
        if cursor + name_len > body.len() {
            return Err(Error::Format {
                offset: cursor as u64,
                msg: "truncated entry name".into(),
            });
        }
        let name = std::str::from_utf8(&body[cursor..cursor + name_len])
            .map_err(|_| Error::Format {
                offset: cursor as u64,
                msg: "entry name is not UTF-8".into(),
            })?
            .to_string();
        cursor += name_len;
        let tensor_offset = cursor as u64;
        let tensor = tensor_from_bytes(body, &mut cursor, 0)?;
        if i == 0 {
            if name != CONFIG_ENTRY {
                return Err(Error::Schema(format!(
                    "first checkpoint entry must be '{CONFIG_ENTRY}', found '{name}'"
                )));
            }
            config = Some(config_from_tensor(&tensor, tensor_offset)?);
        } else if map.insert(name.clone(), tensor).is_some() {
            return Err(Error::Schema(format!("duplicate tensor '{name}'")));
        }
    }
    if cursor != body.len() {
        return Err(Error::Format {
            offset: cursor as u64,
            msg: format!("{} trailing bytes after entries", body.len() - cursor),
        });
    }
    let cfg = config.ok_or_else(|| Error::Schema("checkpoint holds no entries".into()))?;
    let params = TUnetParams::from_named(&cfg, map)?;
    Ok((cfg, params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, TUnetParams)> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    checkpoint_from_bytes(&bytes)
}

// ── Sample directories (cmd_synth output / external import) ───────────

pub fn sample_file_names(index: usize) -> (String, String) {
    (format!("img_{index:04}.tnsr"), format!("msk_{index:04}.tnsr"))
}

pub fn save_sample_dir(dir: impl AsRef<Path>, samples: &[Sample], dtype: Dtype) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let (img, msk) = sample_file_names(i);
        save_tensor(dir.join(img), &s.image, dtype)?;
        save_tensor(dir.join(msk), &s.mask, dtype)?;
    }
    Ok(())
}

/// Load `img_%04d.tnsr` / `msk_%04d.tnsr` pairs with consecutive indexes
/// starting at 0.
pub fn load_sample_dir(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut samples = Vec::new();
    let mut index = 0;
    loop {
        let (img, msk) = sample_file_names(index);
        let img_path = dir.join(&img);
        if !img_path.exists() {
            break;
        }
        let image = load_tensor(&img_path)?;
        let mask = load_tensor(dir.join(&msk))?;
        if mask.shape().len() != 3 || mask.shape()[1..] != image.shape()[1..] {
            return Err(Error::Schema(format!(
                "{msk}: mask shape {:?} does not match image {:?}",
                mask.shape(),
                image.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("{msk}: mask is not binary")));
        }
        samples.push(Sample { image, mask });
        index += 1;
    }
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "no img_0000.tnsr found in {}",
            dir.display()
        )));
    }
    Ok(samples)
}
