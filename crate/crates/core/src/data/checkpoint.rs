use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Network, NetworkSpec, Role};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8;
const SPEC_LEN: usize = 2 + 5 * 4;

/// Serialize a spec-built network.
///
/// Layout: magic, u32 version, then the payload (role u8, critic u8, five
/// u32 spec fields, u64 weight count, f32 weights, u64 buffer count, f32
/// buffers), then the CRC-32 of the payload. All integers and floats are
/// little-endian.
pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let spec = net
        .spec()
        .ok_or_else(|| Error::Contract("only spec-built networks can be checkpointed".into()))?;
    let weights = net.flat_params();
    let buffers = net.flat_buffers();
    let mut payload = Vec::with_capacity(SPEC_LEN + 16 + 4 * (weights.len() + buffers.len()));
    payload.push(spec.role.code());
    payload.push(net.is_critic() as u8);
    for v in [
        spec.image_size,
        spec.image_channels,
        spec.depth_scale,
        spec.latent_dim,
        spec.num_classes,
    ] {
        payload.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for block in [&weights, &buffers] {
        payload.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for x in block.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!(
                "length error: need {n} bytes at payload offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        let n = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("length error: absurd count {n}")))?;
        Ok(self
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, reader expects {CHECKPOINT_VERSION}"
        )));
    }
    let (payload, tail) = bytes[HEADER_LEN..].split_at(bytes.len() - HEADER_LEN - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    let head = r.take(2)?;
    let role = Role::from_code(head[0])
        .ok_or_else(|| Error::Checkpoint(format!("unknown role code {}", head[0])))?;
    let critic = match head[1] {
        0 => false,
        1 => true,
        c => return Err(Error::Checkpoint(format!("bad critic flag {c}"))),
    };
    let spec = NetworkSpec {
        role,
        image_size: r.u32()? as usize,
        image_channels: r.u32()? as usize,
        depth_scale: r.u32()? as usize,
        latent_dim: r.u32()? as usize,
        num_classes: r.u32()? as usize,
    };
    spec.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid spec record: {e}")))?;
    let weights = r.floats()?;
    let buffers = r.floats()?;
    if r.pos != payload.len() {
        return Err(Error::Checkpoint(format!(
            "length error: {} trailing payload bytes",
            payload.len() - r.pos
        )));
    }
    let mut net = Network::build(&spec, critic, 0)?;
    if weights.len() != net.param_count() {
        return Err(Error::Checkpoint(format!(
            "length error: {} weights stored, spec needs {}",
            weights.len(),
            net.param_count()
        )));
    }
    net.load_flat_params(&weights)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    net.load_flat_buffers(&buffers)
        .map_err(|e| Error::Checkpoint(format!("length error: {e}")))?;
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
