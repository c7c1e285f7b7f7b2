//! EditNet, DCNet, and decoding over either or both.

mod dcnet;
mod decode;
mod editnet;
mod features;

pub use dcnet::{DcNet, DcNetContext, DcNetState};
pub use decode::{
    fuse_distributions, greedy_decode, sample_decode, source_ids, teacher_forced,
    AlignmentStep, DecodeSession, Decoded, StepOutput, TeacherForced,
};
pub use editnet::{EditNet, EditNetContext, EditNetState, EncodedCaption, StepTrace};
pub use features::VisualFeatures;

use crate::error::{Error, Result};

/// Dimensions and ablation switches shared by both models.
///
/// DCNet uses `dc_hidden` per encoder direction and `hidden_dim` for its
/// decoder; both models use `embed_dim` and `attn_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub dc_hidden: usize,
    pub k: usize,
    pub d_v: usize,
    pub use_visual: bool,
    pub use_context_gate: bool,
    pub hard_scma: bool,
    pub fuse_dcnet: bool,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            attn_dim: 32,
            dc_hidden: 32,
            k: 8,
            d_v: 64,
            use_visual: true,
            use_context_gate: true,
            hard_scma: true,
            fuse_dcnet: true,
        }
    }

    /// Full-size dimensions. Only meant to be validated and counted.
    pub fn full_dims(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 1024,
            hidden_dim: 1024,
            attn_dim: 512,
            dc_hidden: 512,
            k: 36,
            d_v: 2048,
            ..ModelConfig::desk(vocab_size)
        }
    }

    pub fn overfit(vocab_size: usize) -> Self {
        ModelConfig {
            fuse_dcnet: false,
            ..ModelConfig::desk(vocab_size)
        }
    }

    /// Tiny dimensions for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 6,
            hidden_dim: 8,
            attn_dim: 5,
            dc_hidden: 4,
            k: 3,
            d_v: 4,
            use_visual: true,
            use_context_gate: true,
            hard_scma: true,
            fuse_dcnet: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attn_dim", self.attn_dim),
            ("dc_hidden", self.dc_hidden),
            ("k", self.k),
            ("d_v", self.d_v),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size <= crate::data::UNK {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn editnet_param_count(&self) -> usize {
        let (v, e, h, a, dv) = (
            self.vocab_size,
            self.embed_dim,
            self.hidden_dim,
            self.attn_dim,
            self.d_v,
        );
        let lstm = |input: usize, hidden: usize| 4 * hidden * (hidden + input) + 4 * hidden;
        let attn = |key: usize, query: usize| key * a + a * query + a;
        let vis = if self.use_visual { dv } else { 0 };
        let mut n = v * e;
        n += lstm(e, h);
        n += lstm(e + h + vis + h, h);
        n += attn(h, h);
        if self.use_context_gate {
            n += h * h + h * (e + h) + h * (e + h + h);
        }
        if self.use_visual {
            n += attn(dv, h);
        }
        n += lstm(h + vis + h, h) + h * 2 * h;
        n += v * h + v;
        n += 2 * self.dc_hidden * h + 2 * self.dc_hidden;
        n
    }

    pub fn dcnet_param_count(&self) -> usize {
        let (v, e, h, a, hd) = (
            self.vocab_size,
            self.embed_dim,
            self.hidden_dim,
            self.attn_dim,
            self.dc_hidden,
        );
        let lstm = |input: usize, hidden: usize| 4 * hidden * (hidden + input) + 4 * hidden;
        let mut n = v * e;
        n += 2 * lstm(e, hd);
        n += lstm(e + 2 * hd + h, h);
        n += 2 * hd * a + a * h + a;
        n += lstm(h + 2 * hd, h);
        n += v * h + v;
        n += 2 * hd * h + 2 * hd;
        n
    }

    pub fn param_count(&self) -> usize {
        self.editnet_param_count() + self.dcnet_param_count()
    }
}

pub(crate) fn check_token(id: usize, vocab: usize) -> Result<()> {
    if id >= vocab {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_counts_match_constructed_models() {
        for cfg in [
            ModelConfig::tiny(12),
            ModelConfig {
                use_visual: false,
                use_context_gate: false,
                ..ModelConfig::tiny(9)
            },
            ModelConfig::desk(46),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let e = EditNet::new(&cfg, &mut rng).unwrap();
            let d = DcNet::new(&cfg, &mut rng).unwrap();
            assert_eq!(e.params.num_scalars(), cfg.editnet_param_count());
            assert_eq!(d.params.num_scalars(), cfg.dcnet_param_count());
        }
    }

    #[test]
    fn full_dims_are_valid() {
        let cfg = ModelConfig::full_dims(10_000);
        cfg.validate().unwrap();
        assert!(cfg.param_count() > 50_000_000);
    }

    #[test]
    fn zero_dimension_rejected() {
        let cfg = ModelConfig {
            attn_dim: 0,
            ..ModelConfig::tiny(12)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
