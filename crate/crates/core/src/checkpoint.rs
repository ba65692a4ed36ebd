//! `AAKT1` binary checkpoints.
//!
//! Layout: the 5-byte magic `AAKT1`, a `u32` record count, then records of
//! `tag: u8`, `rank: u32`, `rank` extents as `u32`, and `product(extents)`
//! raw `f64` values. Integers and floats are little-endian. Network layers
//! come first (tag = layer kind; parameter-free layers carry a single zero
//! extent), followed by the optimizer buffers and its step counter.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::optim::Optimizer;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"AAKT1";

fn put_record(out: &mut Vec<u8>, tag: u8, t: &Tensor) {
    out.push(tag);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(net: &Network, optimizer: Option<&dyn Optimizer>) -> Vec<u8> {
    let buffers = optimizer.map(|o| o.state_buffers()).unwrap_or_default();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&((net.layers().len() + buffers.len()) as u32).to_le_bytes());
    let empty = Tensor::zeros(&[0]);
    for layer in net.layers() {
        put_record(&mut out, layer.kind.tag(), layer.theta.as_ref().unwrap_or(&empty));
    }
    for (tag, t) in &buffers {
        put_record(&mut out, *tag, t);
    }
    out
}

pub fn save<W: Write>(mut w: W, net: &Network, optimizer: Option<&dyn Optimizer>) -> Result<()> {
    w.write_all(&encode(net, optimizer)).map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated checkpoint: wanted {n} more bytes"),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn record(&mut self) -> Result<(u8, Tensor)> {
        let tag = self.take(1)?[0];
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::Format { offset: self.pos, msg: "record too large".into() })?,
        )?;
        let data =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Ok((tag, Tensor::new(shape, data)?))
    }
}

/// Restores parameters (and optimizer state, when given) into structures
/// already built with the same architecture.
pub fn decode(bytes: &[u8], net: &mut Network, optimizer: Option<&mut dyn Optimizer>) -> Result<()> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "missing AAKT1 magic".into() });
    }
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let offset = cur.pos;
        records.push((offset, cur.record()?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format { offset: cur.pos, msg: "trailing bytes after last record".into() });
    }
    let n_layers = net.layers().len();
    if records.len() < n_layers {
        return Err(Error::Format {
            offset: 5,
            msg: format!("{} records for a {n_layers}-layer network", records.len()),
        });
    }
    let mut rest = records.split_off(n_layers);
    let mut thetas = Vec::with_capacity(n_layers);
    for (layer, (offset, (tag, t))) in net.layers().iter().zip(records) {
        if tag != layer.kind.tag() {
            return Err(Error::Format {
                offset,
                msg: format!("layer tag {tag} does not match {:?}", layer.kind),
            });
        }
        match &layer.theta {
            Some(theta) if theta.shape() == t.shape() => thetas.push(Some(t)),
            None if t.is_empty() => thetas.push(None),
            _ => {
                return Err(Error::Format {
                    offset,
                    msg: format!("parameter shape {:?} does not match layer", t.shape()),
                })
            }
        }
    }
    if let Some(opt) = optimizer {
        opt.load_state_buffers(rest.drain(..).map(|(_, r)| r).collect())?;
    }
    for (layer, theta) in net.layers_mut().iter_mut().zip(thetas) {
        layer.theta = theta;
    }
    net.clear_caches();
    Ok(())
}

pub fn load<R: Read>(mut r: R, net: &mut Network, optimizer: Option<&mut dyn Optimizer>) -> Result<()> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    decode(&bytes, net, optimizer)
}
