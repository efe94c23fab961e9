//! `FREM` params file: magic, format version, spec fields, then each
//! layer's weights (row-major) and bias as little-endian `f32`.

use std::io::{Read, Write};

use super::{DenseLayer, EmbedError, EmbedderKind, EmbedderParams, EmbedderSpec, Result};
use crate::codec::{Reader, Truncated, Writer};

const MAGIC: &[u8; 4] = b"FREM";
const VERSION: u8 = 1;

impl From<Truncated> for EmbedError {
    fn from(_: Truncated) -> Self {
        EmbedError::Format("truncated".into())
    }
}

fn kind_code(kind: EmbedderKind) -> u8 {
    match kind {
        EmbedderKind::Identity => 0,
        EmbedderKind::RandomProjection => 1,
        EmbedderKind::Mlp => 2,
    }
}

impl EmbedderParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u8(VERSION);
        w.u8(kind_code(self.spec.kind));
        w.u32(self.spec.input_dim as u32);
        w.u32(self.spec.output_dim as u32);
        w.u32(self.spec.hidden_dims.len() as u32);
        for h in &self.spec.hidden_dims {
            w.u32(*h as u32);
        }
        w.u64(self.spec.seed);
        for layer in &self.layers {
            w.f32_slice(&layer.weights);
            w.f32_slice(&layer.bias);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(EmbedError::Format("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(EmbedError::Format(format!("unknown version {version}")));
        }
        let kind = match r.u8()? {
            0 => EmbedderKind::Identity,
            1 => EmbedderKind::RandomProjection,
            2 => EmbedderKind::Mlp,
            k => return Err(EmbedError::Format(format!("unknown embedder kind {k}"))),
        };
        let input_dim = r.u32()? as usize;
        let output_dim = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if n_hidden > r.remaining() / 4 {
            return Err(Truncated.into());
        }
        let hidden_dims = (0..n_hidden)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<std::result::Result<_, _>>()?;
        let seed = r.u64()?;
        let spec = EmbedderSpec {
            kind,
            input_dim,
            output_dim,
            hidden_dims,
            seed,
        };
        spec.validate()?;
        let mut layers = Vec::new();
        for (inputs, outputs) in spec.layer_shapes() {
            let n = inputs.checked_mul(outputs).ok_or(Truncated)?;
            let weights = r.f32_vec(n)?;
            let bias = r.f32_vec(outputs)?;
            layers.push(DenseLayer {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        if r.remaining() != 0 {
            return Err(EmbedError::Format("trailing bytes".into()));
        }
        EmbedderParams::from_layers(spec, layers)
    }
}

pub fn write_params<W: Write>(params: &EmbedderParams, mut out: W) -> Result<()> {
    out.write_all(&params.to_bytes())?;
    Ok(())
}

pub fn read_params<R: Read>(mut input: R) -> Result<EmbedderParams> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    EmbedderParams::from_bytes(&bytes)
}
