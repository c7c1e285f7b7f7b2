use rand::Rng;

use super::{check_token, ModelConfig};
use crate::attention::{attention_weights, project_keys, AdditiveAttentionWeights, ProjectedKeys};
use crate::autodiff::{Graph, Tensor, Var};
use crate::cells::{lstm_step, LstmState, LstmWeights};
use crate::error::{Error, Result};
use crate::params::{uniform_matrix, uniform_vector, Binding, ParamId, ParamSet};

#[derive(Clone, Copy, Debug)]
pub struct DcNetState {
    pub att: LstmState,
    pub lang: LstmState,
}

#[derive(Clone, Debug)]
pub struct DcNetContext {
    pub input: Vec<usize>,
    /// `[n, 2 * dc_hidden]` forward/backward states per word.
    pub states: Var,
    /// Final forward state followed by final backward state.
    pub code: Var,
    mean: Var,
    keys: ProjectedKeys,
}

/// Denoising auto-encoder over text: bidirectional encoder, two-LSTM
/// attention decoder.
#[derive(Clone, Debug)]
pub struct DcNet {
    pub config: ModelConfig,
    pub params: ParamSet,
    embed: ParamId,
    fwd: LstmWeights,
    bwd: LstmWeights,
    att_lstm: LstmWeights,
    attn: AdditiveAttentionWeights,
    lang: LstmWeights,
    w_out: ParamId,
    b_out: ParamId,
    w_d: ParamId,
    b_d: ParamId,
}

impl DcNet {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (e, h, hd) = (c.embed_dim, c.hidden_dim, c.dc_hidden);
        let mut ps = ParamSet::new();
        let embed = ps.add(
            "dcnet.embed",
            uniform_vector(rng, c.vocab_size * e, 1.0).reshaped(vec![c.vocab_size, e])?,
        );
        let fwd = LstmWeights::new(&mut ps, rng, "dcnet.encoder_fwd", e, hd);
        let bwd = LstmWeights::new(&mut ps, rng, "dcnet.encoder_bwd", e, hd);
        let att_lstm = LstmWeights::new(&mut ps, rng, "dcnet.att_lstm", e + 2 * hd + h, h);
        let attn = AdditiveAttentionWeights::new(&mut ps, rng, "dcnet.attn", 2 * hd, h, c.attn_dim);
        let lang = LstmWeights::new(&mut ps, rng, "dcnet.lang_lstm", h + 2 * hd, h);
        let w_out = ps.add("dcnet.w_out", uniform_matrix(rng, c.vocab_size, h));
        let b_out = ps.add("dcnet.b_out", Tensor::zeros(&[c.vocab_size]));
        let w_d = ps.add("dcnet.w_d", uniform_matrix(rng, 2 * hd, h));
        let b_d = ps.add("dcnet.b_d", Tensor::zeros(&[2 * hd]));
        Ok(DcNet {
            config: c.clone(),
            params: ps,
            embed,
            fwd,
            bwd,
            att_lstm,
            attn,
            lang,
            w_out,
            b_out,
            w_d,
            b_d,
        })
    }

    /// Per-word bidirectional states and the compressed code.
    pub fn encode(&self, g: &mut Graph, b: &Binding, tokens: &[usize]) -> Result<(Var, Var)> {
        if tokens.is_empty() {
            return Err(Error::Empty("input caption"));
        }
        let hd = self.config.dc_hidden;
        let mut xs = Vec::with_capacity(tokens.len());
        for &t in tokens {
            check_token(t, self.config.vocab_size)?;
            xs.push(g.embedding_lookup(b.get(self.embed), t)?);
        }
        let mut s = LstmState::zeros(g, hd)?;
        let mut fwd = Vec::with_capacity(xs.len());
        for &x in &xs {
            s = lstm_step(g, b, &self.fwd, x, &s)?;
            fwd.push(s.h);
        }
        let mut s = LstmState::zeros(g, hd)?;
        let mut bwd = vec![s.h; xs.len()];
        for (i, &x) in xs.iter().enumerate().rev() {
            s = lstm_step(g, b, &self.bwd, x, &s)?;
            bwd[i] = s.h;
        }
        let rows = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &r)| g.concat(&[f, r]))
            .collect::<Result<Vec<_>>>()?;
        let states = g.stack(&rows)?;
        let code = g.concat(&[fwd[fwd.len() - 1], bwd[0]])?;
        Ok((states, code))
    }

    pub fn prepare(&self, g: &mut Graph, b: &Binding, tokens: &[usize]) -> Result<DcNetContext> {
        let (states, code) = self.encode(g, b, tokens)?;
        let n = tokens.len();
        let w = g.constant(Tensor::filled(&[n], 1.0 / n as f64))?;
        let mean = g.matmul(w, states)?;
        let keys = project_keys(g, b, &self.attn, states)?;
        Ok(DcNetContext {
            input: tokens.to_vec(),
            states,
            code,
            mean,
            keys,
        })
    }

    pub fn initial_state(&self, g: &mut Graph) -> Result<DcNetState> {
        let h = self.config.hidden_dim;
        Ok(DcNetState {
            att: LstmState::zeros(g, h)?,
            lang: LstmState::zeros(g, h)?,
        })
    }

    pub fn step(
        &self,
        g: &mut Graph,
        b: &Binding,
        ctx: &DcNetContext,
        state: &DcNetState,
        prev: usize,
    ) -> Result<(Var, DcNetState)> {
        check_token(prev, self.config.vocab_size)?;
        let w = g.embedding_lookup(b.get(self.embed), prev)?;
        let x1 = g.concat(&[w, ctx.mean, state.lang.h])?;
        let att = lstm_step(g, b, &self.att_lstm, x1, &state.att)?;
        let alpha = attention_weights(g, b, &self.attn, &ctx.keys, att.h)?;
        let attended = g.matmul(alpha, ctx.states)?;
        let x2 = g.concat(&[att.h, attended])?;
        let lang = lstm_step(g, b, &self.lang, x2, &state.lang)?;
        let logits = g.matmul(b.get(self.w_out), lang.h)?;
        let logits = g.add(logits, b.get(self.b_out))?;
        Ok((logits, DcNetState { att, lang }))
    }

    pub fn project_hidden(&self, g: &mut Graph, b: &Binding, h: Var) -> Result<Var> {
        let p = g.matmul(b.get(self.w_d), h)?;
        g.add(p, b.get(self.b_d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(cfg: &ModelConfig, seed: u64) -> DcNet {
        DcNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn state_width_is_twice_direction() {
        let cfg = ModelConfig {
            dc_hidden: 16,
            ..ModelConfig::tiny(12)
        };
        let m = net(&cfg, 0);
        let mut g = Graph::new();
        let b = m.params.bind_frozen(&mut g).unwrap();
        let (states, code) = m.encode(&mut g, &b, &[4, 5, 6, 7, 8]).unwrap();
        assert_eq!(g.value(states).shape(), &[5, 32]);
        assert_eq!(g.value(code).shape(), &[32]);
        let (one, code1) = m.encode(&mut g, &b, &[4]).unwrap();
        assert_eq!(g.value(one).data(), g.value(code1).data());
    }

    #[test]
    fn tied_directions_mirror_on_palindromes() {
        let cfg = ModelConfig::tiny(12);
        let mut m = net(&cfg, 1);
        for (f, r) in m.fwd.ids().into_iter().zip(m.bwd.ids()) {
            let t = m.params.get(f).clone();
            *m.params.get_mut(r) = t;
        }
        let tokens = [4, 7, 9, 7, 4];
        let mut g = Graph::new();
        let b = m.params.bind_frozen(&mut g).unwrap();
        let (states, _) = m.encode(&mut g, &b, &tokens).unwrap();
        let s = g.value(states);
        let hd = cfg.dc_hidden;
        let n = tokens.len();
        for i in 0..n {
            let (a, bb) = (s.row(i), s.row(n - 1 - i));
            assert_eq!(&a[..hd], &bb[hd..]);
            assert_eq!(&a[hd..], &bb[..hd]);
        }
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny(12);
        let m = net(&cfg, 2);
        let init = m.params.tensors().to_vec();
        let report = finite_diff_check(
            |g, vars| {
                let b = Binding::from_vars(vars.to_vec());
                let ctx = m.prepare(g, &b, &[4, 8, 5])?;
                let mut s = m.initial_state(g)?;
                let mut total = g.scalar(0.0)?;
                for (prev, target) in [(1, 4), (4, 5), (5, 2)] {
                    let (l, ns) = m.step(g, &b, &ctx, &s, prev)?;
                    let lp = g.log_softmax(l)?;
                    let t = g.index(lp, target)?;
                    total = g.sub(total, t)?;
                    s = ns;
                }
                Ok(total)
            },
            &init,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}
