//! Little-endian binary checkpoint.
//!
//! Layout: magic `EDITSEQ1`, u32 version, model config, vocabulary,
//! epoch and stage, the EditNet and DCNet tensors by name, then an optional
//! Adam state per model. Floats are stored as raw f64 bits.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{DcNet, EditNet, ModelConfig};
use crate::optim::AdamState;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"EDITSEQ1";
pub const VERSION: u32 = 1;

const MAX_RANK: u32 = 8;
const MAX_STRING: u32 = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub epoch: u64,
    pub stage: String,
    pub editnet: Vec<(String, Tensor)>,
    pub dcnet: Vec<(String, Tensor)>,
    pub editnet_adam: Option<AdamState>,
    pub dcnet_adam: Option<AdamState>,
}

fn named(ps: &ParamSet) -> Vec<(String, Tensor)> {
    ps.names().iter().cloned().zip(ps.tensors().iter().cloned()).collect()
}

impl Checkpoint {
    pub fn from_models(vocab: &Vocab, editnet: &EditNet, dcnet: &DcNet) -> Self {
        Checkpoint {
            config: editnet.config.clone(),
            vocab: vocab.clone(),
            epoch: 0,
            stage: String::new(),
            editnet: named(&editnet.params),
            dcnet: named(&dcnet.params),
            editnet_adam: None,
            dcnet_adam: None,
        }
    }

    /// Rebuilds both models; every tensor must match the architecture the
    /// stored config describes.
    pub fn models(&self) -> Result<(EditNet, DcNet)> {
        if self.config.vocab_size != self.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "config vocab_size {} but {} vocabulary tokens",
                self.config.vocab_size,
                self.vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut e = EditNet::new(&self.config, &mut rng)?;
        let mut d = DcNet::new(&self.config, &mut rng)?;
        e.params.load_from(&self.editnet)?;
        d.params.load_from(&self.dcnet)?;
        Ok((e, d))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        write_config(w, &self.config)?;
        put_u32(w, self.vocab.min_count() as u32)?;
        put_u32(w, self.vocab.len() as u32)?;
        for t in self.vocab.tokens() {
            put_str(w, t)?;
        }
        put_u64(w, self.epoch)?;
        put_str(w, &self.stage)?;
        for set in [&self.editnet, &self.dcnet] {
            put_u32(w, set.len() as u32)?;
            for (name, t) in set {
                put_str(w, name)?;
                put_tensor(w, t)?;
            }
        }
        for adam in [&self.editnet_adam, &self.dcnet_adam] {
            match adam {
                None => w.write_all(&[0])?,
                Some(s) => {
                    w.write_all(&[1])?;
                    put_u64(w, s.step)?;
                    put_u32(w, s.m.len() as u32)?;
                    for t in s.m.iter().chain(&s.v) {
                        put_tensor(w, t)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = read_config(r)?;
        let min_count = get_u32(r)? as usize;
        let n = get_u32(r)?;
        let tokens = (0..n).map(|_| get_str(r)).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_tokens(tokens, min_count);
        let epoch = get_u64(r)?;
        let stage = get_str(r)?;
        let mut sets = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = get_u32(r)?;
            let mut set = Vec::new();
            for _ in 0..n {
                let name = get_str(r)?;
                set.push((name, get_tensor(r)?));
            }
            sets.push(set);
        }
        let mut adams = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut flag = [0u8];
            r.read_exact(&mut flag)?;
            adams.push(match flag[0] {
                0 => None,
                1 => {
                    let step = get_u64(r)?;
                    let n = get_u32(r)? as usize;
                    let m = (0..n).map(|_| get_tensor(r)).collect::<Result<Vec<_>>>()?;
                    let v = (0..n).map(|_| get_tensor(r)).collect::<Result<Vec<_>>>()?;
                    Some(AdamState { step, m, v })
                }
                f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let dcnet_adam = adams.pop().flatten();
        let editnet_adam = adams.pop().flatten();
        let dcnet = sets.pop().unwrap_or_default();
        let editnet = sets.pop().unwrap_or_default();
        config.validate()?;
        Ok(Checkpoint {
            config,
            vocab,
            epoch,
            stage,
            editnet,
            dcnet,
            editnet_adam,
            dcnet_adam,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }
}

fn write_config<W: Write>(w: &mut W, c: &ModelConfig) -> Result<()> {
    for d in [c.vocab_size, c.embed_dim, c.hidden_dim, c.attn_dim, c.dc_hidden, c.k, c.d_v] {
        put_u64(w, d as u64)?;
    }
    let flags = [c.use_visual, c.use_context_gate, c.hard_scma, c.fuse_dcnet];
    w.write_all(&flags.map(u8::from))?;
    Ok(())
}

fn read_config<R: Read>(r: &mut R) -> Result<ModelConfig> {
    let mut d = [0usize; 7];
    for x in &mut d {
        *x = usize::try_from(get_u64(r)?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
    }
    let mut f = [0u8; 4];
    r.read_exact(&mut f)?;
    let flag = |b: u8| match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Checkpoint(format!("bad config flag {b}"))),
    };
    Ok(ModelConfig {
        vocab_size: d[0],
        embed_dim: d[1],
        hidden_dim: d[2],
        attn_dim: d[3],
        dc_hidden: d[4],
        k: d[5],
        d_v: d[6],
        use_visual: flag(f[0])?,
        use_context_gate: flag(f[1])?,
        hard_scma: flag(f[2])?,
        fuse_dcnet: flag(f[3])?,
    })
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    put_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        put_u64(w, d as u64)?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)?;
    if n > MAX_STRING {
        return Err(Error::Checkpoint(format!("string length {n} too large")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn get_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = get_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::Checkpoint(format!("tensor rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = usize::try_from(get_u64(r)?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(numel);
    let mut b = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;

    fn sample() -> Checkpoint {
        let vocab = Vocab::from_tokens(
            ["<pad>", "<start>", "<end>", "<unk>", "a", "cat", "dog", "on", "mat"]
                .map(String::from)
                .to_vec(),
            1,
        );
        let cfg = ModelConfig::tiny(vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = EditNet::new(&cfg, &mut rng).unwrap();
        let d = DcNet::new(&cfg, &mut rng).unwrap();
        let mut ck = Checkpoint::from_models(&vocab, &e, &d);
        let mut adam = Adam::new(&e.params, 1e-3);
        adam.state.step = 7;
        adam.state.m[0].data_mut()[0] = -0.0;
        adam.state.v[1].data_mut()[2] = f64::MIN_POSITIVE / 3.0;
        ck.editnet_adam = Some(adam.state);
        ck.epoch = 4;
        ck.stage = "xe".into();
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.vocab, ck.vocab);
        for (a, b) in back.editnet.iter().chain(&back.dcnet).zip(ck.editnet.iter().chain(&ck.dcnet)) {
            assert_eq!(a.0, b.0);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.1), bits(&b.1));
        }
        assert!(back.editnet_adam.as_ref().unwrap().m[0].data()[0].is_sign_negative());
        assert!(back.dcnet_adam.is_none());
        let (e, d) = back.models().unwrap();
        assert_eq!(named(&e.params), ck.editnet);
        assert_eq!(named(&d.params), ck.dcnet);
    }

    #[test]
    fn rejects_unknown_version_and_bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        bytes[0] = b'X';
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn truncated_or_extended_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::read_from(&mut longer.as_slice()).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut ck = sample();
        ck.config.hidden_dim += 1;
        assert!(ck.models().is_err());
    }
}
