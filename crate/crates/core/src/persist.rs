//! Binary checkpoint and whitening-transform files.
//!
//! Both formats are little-endian. A checkpoint is
//!
//! ```text
//! "LLAB" | version u32 | objective u8 | activation u8 | input_dim u32
//!        | latent_dim u32 | n_hidden u32 | hidden u32 × n_hidden
//!        | n_params u64 | params f64 × n_params | crc32(params) u32
//! ```
//!
//! and a transform file is
//!
//! ```text
//! "LWHT" | d u32 | mean f64 × d | eigvals f64 × d | eigvecs f64 × d²
//!        | degenerate bitmask, ⌈d/8⌉ bytes, LSB first
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::objectives::{Objective, Vae, VaeArch};
use crate::whitening::WhiteningTransform;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LLAB";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const TRANSFORM_MAGIC: [u8; 4] = *b"LWHT";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated {
            expected: usize::MAX,
            actual: self.bytes.len(),
        })?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Format(format!("element count {n} overflows"))
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: u32::from_le_bytes(expected),
                found: u32::from_le_bytes(found.try_into().expect("4 bytes")),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Vae, objective: Objective) -> Result<Vec<u8>> {
    let arch = &model.arch;
    let params = model.store.flatten();
    let mut out = Vec::with_capacity(64 + params.len() * 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(objective.tag());
    out.push(arch.activation.tag());
    out.extend_from_slice(&to_u32(arch.input_dim, "input_dim")?.to_le_bytes());
    out.extend_from_slice(&to_u32(arch.latent_dim, "latent_dim")?.to_le_bytes());
    out.extend_from_slice(&to_u32(arch.hidden.len(), "hidden layer count")?.to_le_bytes());
    for &h in &arch.hidden {
        out.extend_from_slice(&to_u32(h, "hidden width")?.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    let start = out.len();
    put_f64s(&mut out, &params);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Vae, Objective)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let objective_tag = r.u8()?;
    let objective = Objective::from_tag(objective_tag)
        .ok_or_else(|| Error::Format(format!("unknown objective tag {objective_tag}")))?;
    let act_tag = r.u8()?;
    let activation = Activation::from_tag(act_tag)
        .ok_or_else(|| Error::Format(format!("unknown activation tag {act_tag}")))?;
    let input_dim = r.u32()? as usize;
    let latent_dim = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let hidden = (0..n_hidden)
        .map(|_| r.u32().map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = VaeArch {
        input_dim,
        hidden,
        latent_dim,
        activation,
    };
    arch.validate()?;
    let count = r.u64()?;
    let count = usize::try_from(count)
        .map_err(|_| Error::Format(format!("parameter count {count} too large")))?;
    let start = r.pos;
    let params = r.f64s(count)?;
    let computed = crc32fast::hash(&bytes[start..r.pos]);
    let stored = r.u32()?;
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    r.finish()?;
    let mut model = Vae::new(arch, &mut ChaCha8Rng::seed_from_u64(0))?;
    if model.store.num_scalars() != count {
        return Err(Error::Format(format!(
            "architecture has {} parameters, payload has {count}",
            model.store.num_scalars()
        )));
    }
    model.store.load_flat(&params)?;
    Ok((model, objective))
}

pub fn save_checkpoint(path: &Path, model: &Vae, objective: Objective) -> Result<()> {
    fs::write(path, encode_checkpoint(model, objective)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Vae, Objective)> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_transform(t: &WhiteningTransform) -> Result<Vec<u8>> {
    let d = t.dim();
    if t.eigvals.len() != d || t.eigvecs.len() != d * d || t.degenerate.len() != d {
        return Err(Error::InvalidArgument(
            "transform fields disagree on the dimension".into(),
        ));
    }
    let mut out = Vec::with_capacity(8 + (2 * d + d * d) * 8 + d.div_ceil(8));
    out.extend_from_slice(&TRANSFORM_MAGIC);
    out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
    put_f64s(&mut out, &t.mean);
    put_f64s(&mut out, &t.eigvals);
    put_f64s(&mut out, &t.eigvecs);
    let mut mask = vec![0u8; d.div_ceil(8)];
    for (j, _) in t.degenerate.iter().enumerate().filter(|(_, &g)| g) {
        mask[j / 8] |= 1 << (j % 8);
    }
    out.extend_from_slice(&mask);
    Ok(out)
}

pub fn decode_transform(bytes: &[u8]) -> Result<WhiteningTransform> {
    let mut r = Reader::new(bytes);
    r.magic(TRANSFORM_MAGIC)?;
    let d = r.u32()? as usize;
    if d == 0 {
        return Err(Error::Format("transform dimension is 0".into()));
    }
    let mean = r.f64s(d)?;
    let eigvals = r.f64s(d)?;
    let eigvecs = r.f64s(d * d)?;
    let mask = r.take(d.div_ceil(8))?;
    let degenerate = (0..d).map(|j| mask[j / 8] >> (j % 8) & 1 == 1).collect();
    r.finish()?;
    Ok(WhiteningTransform {
        mean,
        eigvecs,
        eigvals,
        degenerate,
    })
}

pub fn save_transform(path: &Path, t: &WhiteningTransform) -> Result<()> {
    fs::write(path, encode_transform(t)?)?;
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<WhiteningTransform> {
    decode_transform(&fs::read(path)?)
}
