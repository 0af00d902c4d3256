//! Parameter file.
//!
//! ```text
//! magic      8 bytes  "MSIGPRM\0"
//! version    u32 LE
//! header     u32 LE length + UTF-8 `key=value` lines (encoder config, submotion flag)
//! tensors    u32 LE count, then per tensor:
//!            u16 LE name length, name, u8 rank, rank x u32 LE dims, f32 LE values
//! checksum   u32 LE CRC-32 of everything above
//! ```

use std::fs;
use std::path::Path;

use super::{layout, CellKind, EncoderConfig, EncoderParams, Readout};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MSIGPRM\0";
pub const PARAMS_VERSION: u32 = 1;

fn header_text(params: &EncoderParams) -> String {
    let c = params.config();
    format!(
        "input_width={}\nhidden_size={}\nnum_recurrent_layers={}\nembedding_dim={}\nclass_count={}\ncell={}\nreadout={}\nsubmotion={}\nepochs_trained={}\n",
        c.input_width,
        c.hidden_size,
        c.num_recurrent_layers,
        c.embedding_dim,
        c.class_count.map_or("none".to_string(), |v| v.to_string()),
        c.cell,
        c.readout,
        params.is_submotion(),
        params.epochs_trained()
    )
}

pub fn save_params(path: impl AsRef<Path>, params: &EncoderParams) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + params.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    let header = header_text(params);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(params.layout().len() as u32).to_le_bytes());
    for spec in params.layout() {
        buf.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(spec.name.as_bytes());
        buf.push(spec.shape.len() as u8);
        for &d in &spec.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &params.values()[spec.range()] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Load("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn check_crc(buf: &[u8]) -> Result<&[u8]> {
    if buf.len() < 4 {
        return Err(Error::Load("file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Load("checksum mismatch (truncated or corrupted file)".into()));
    }
    Ok(body)
}

fn parse_header(text: &str) -> Result<(EncoderConfig, bool, usize)> {
    let get = |key: &str| -> Result<String> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
            .ok_or_else(|| Error::Load(format!("header lacks `{key}`")))
    };
    let num = |v: String, key: &str| -> Result<usize> {
        v.parse().map_err(|_| Error::Load(format!("bad header value `{v}` for {key}")))
    };
    let config = EncoderConfig {
        input_width: num(get("input_width")?, "input_width")?,
        hidden_size: num(get("hidden_size")?, "hidden_size")?,
        num_recurrent_layers: num(get("num_recurrent_layers")?, "num_recurrent_layers")?,
        embedding_dim: num(get("embedding_dim")?, "embedding_dim")?,
        class_count: match get("class_count")?.as_str() {
            "none" => None,
            v => Some(num(v.to_string(), "class_count")?),
        },
        cell: get("cell")?.parse::<CellKind>()?,
        readout: get("readout")?.parse::<Readout>()?,
    };
    let submotion = match get("submotion")?.as_str() {
        "true" => true,
        "false" => false,
        v => return Err(Error::Load(format!("bad submotion flag `{v}`"))),
    };
    let epochs = num(get("epochs_trained")?, "epochs_trained")?;
    Ok((config, submotion, epochs))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<EncoderParams> {
    let raw = fs::read(path)?;
    let body = check_crc(&raw)?;
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Load("not a parameter file".into()));
    }
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::Load(format!(
            "parameter format version {version}, expected {PARAMS_VERSION}"
        )));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::Load("header is not UTF-8".into()))?;
    let (config, submotion, epochs) = parse_header(header)?;
    config.validate().map_err(|e| Error::Load(e.to_string()))?;
    let expected = layout(&config);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Load(format!("{count} tensors, config implies {}", expected.len())));
    }
    let total = expected.last().map_or(0, |s| s.offset + s.len());
    let mut values = Vec::with_capacity(total);
    for spec in &expected {
        let name_len = r.u16()? as usize;
        let name = r.take(name_len)?;
        if name != spec.name.as_bytes() {
            return Err(Error::Load(format!(
                "tensor `{}` where `{}` was expected",
                String::from_utf8_lossy(name),
                spec.name
            )));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != spec.shape {
            return Err(Error::Load(format!("tensor `{}` has shape {dims:?}, expected {:?}", spec.name, spec.shape)));
        }
        for _ in 0..spec.len() {
            values.push(r.f32()? as f64);
        }
    }
    if r.pos != body.len() {
        return Err(Error::Load("trailing bytes after tensors".into()));
    }
    EncoderParams::from_parts(config, values, submotion, epochs)
}

/// Loads and checks that the stored config equals `expected`.
pub fn load_params_expecting(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<EncoderParams> {
    let params = load_params(path)?;
    if params.config() != expected {
        return Err(Error::Config(format!(
            "parameter file config {:?} does not match expected {:?}",
            params.config(),
            expected
        )));
    }
    Ok(params)
}
