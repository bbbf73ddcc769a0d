use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ModelConfig, Transformer};
use crate::container::{eof_as_format, read_prefix, write_sealed};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HSKM";
const VERSION: u16 = 1;

/// Body: config JSON (u32 length + bytes), u32 tensor count, then per tensor
/// a u16-length name, u8 rank, u32 dims and raw f32 values.
pub fn save_checkpoint(model: &Transformer<f32>, path: &Path) -> Result<u64> {
    let config = serde_json::to_vec(model.config())?;
    let names = model.param_names();
    write_sealed(path, CHECKPOINT_MAGIC, VERSION, 0, |w| {
        w.write_u32::<LittleEndian>(config.len() as u32)?;
        w.write_all(&config)?;
        w.write_u32::<LittleEndian>(model.params().len() as u32)?;
        for (name, t) in names.iter().zip(model.params()) {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(t.shape().len() as u8)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Transformer<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    read_prefix(&mut r, CHECKPOINT_MAGIC, VERSION)?;
    read_body(&mut r).map_err(|e| match e {
        Error::Io(io) => eof_as_format(io),
        other => other,
    })
}

fn read_body(r: &mut impl Read) -> Result<Transformer<f32>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    let config: ModelConfig =
        serde_json::from_slice(&buf).map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    let expected = Transformer::<f32>::param_names_for(&config);
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != expected.len() {
        return Err(Error::format(format!("checkpoint holds {count} tensors, config needs {}", expected.len())));
    }
    let mut params = Vec::with_capacity(count);
    for want in &expected {
        let len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        if name != want.as_bytes() {
            return Err(Error::format(format!("expected tensor {want}, found {}", String::from_utf8_lossy(&name))));
        }
        let rank = r.read_u8()? as usize;
        let shape = (0..rank).map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        params.push(Tensor::new(shape, data)?);
    }
    Transformer::from_parts(config, params)
}
