use rand::Rng;

use super::{check_token, ModelConfig, VisualFeatures};
use crate::attention::{
    attention_weights, context_gate, project_keys, scma_select, soft_attend, visual_attend,
    AdditiveAttentionWeights, ContextGateWeights, ProjectedKeys, ScmaMode,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::cells::{copy_lstm_step, lstm_step, CopyLstmWeights, GateMode, LstmState, LstmWeights};
use crate::error::{Error, Result};
use crate::params::{uniform_matrix, uniform_vector, Binding, ParamId, ParamSet};

/// Encoder states of the input caption, stacked as `[n, hidden]` matrices.
#[derive(Clone, Copy, Debug)]
pub struct EncodedCaption {
    pub states: Var,
    pub memories: Var,
    pub last: Var,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EditNetState {
    pub att: LstmState,
    pub lang: LstmState,
}

/// Per-sequence inputs reused at every step.
#[derive(Clone, Debug)]
pub struct EditNetContext {
    pub input: Vec<usize>,
    pub encoded: EncodedCaption,
    text_keys: ProjectedKeys,
    visual: Option<(ProjectedKeys, Var)>,
}

/// What one step attended to and copied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTrace {
    pub selected: usize,
    pub alpha_max: f64,
    pub copy_gate_mean: f64,
    pub context_gate_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EditNet {
    pub config: ModelConfig,
    pub params: ParamSet,
    embed: ParamId,
    encoder: LstmWeights,
    att_lstm: LstmWeights,
    text_attn: AdditiveAttentionWeights,
    gate: Option<ContextGateWeights>,
    visual_attn: Option<AdditiveAttentionWeights>,
    lang: CopyLstmWeights,
    w_out: ParamId,
    b_out: ParamId,
    w_d: ParamId,
    b_d: ParamId,
    /// Overrides for the copy gate and the context gate.
    pub copy_gate: GateMode,
    pub context_gate_mode: GateMode,
}

impl EditNet {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (e, h) = (c.embed_dim, c.hidden_dim);
        let vis = if c.use_visual { c.d_v } else { 0 };
        let mut ps = ParamSet::new();
        let embed = ps.add(
            "editnet.embed",
            uniform_vector(rng, c.vocab_size * e, 1.0).reshaped(vec![c.vocab_size, e])?,
        );
        let encoder = LstmWeights::new(&mut ps, rng, "editnet.encoder", e, h);
        let att_lstm = LstmWeights::new(&mut ps, rng, "editnet.att_lstm", e + h + vis + h, h);
        let text_attn =
            AdditiveAttentionWeights::new(&mut ps, rng, "editnet.text_attn", h, h, c.attn_dim);
        let gate = c
            .use_context_gate
            .then(|| ContextGateWeights::new(&mut ps, rng, "editnet.context_gate", e, h, h, h));
        let visual_attn = c.use_visual.then(|| {
            AdditiveAttentionWeights::new(&mut ps, rng, "editnet.visual_attn", c.d_v, h, c.attn_dim)
        });
        let lang = CopyLstmWeights::new(&mut ps, rng, "editnet.lang_lstm", h + vis + h, h);
        let w_out = ps.add("editnet.w_out", uniform_matrix(rng, c.vocab_size, h));
        let b_out = ps.add("editnet.b_out", Tensor::zeros(&[c.vocab_size]));
        let w_d = ps.add("editnet.w_d", uniform_matrix(rng, 2 * c.dc_hidden, h));
        let b_d = ps.add("editnet.b_d", Tensor::zeros(&[2 * c.dc_hidden]));
        Ok(EditNet {
            config: c.clone(),
            params: ps,
            embed,
            encoder,
            att_lstm,
            text_attn,
            gate,
            visual_attn,
            lang,
            w_out,
            b_out,
            w_d,
            b_d,
            copy_gate: GateMode::Learned,
            context_gate_mode: GateMode::Learned,
        })
    }

    fn embed_token(&self, g: &mut Graph, b: &Binding, id: usize) -> Result<Var> {
        check_token(id, self.config.vocab_size)?;
        g.embedding_lookup(b.get(self.embed), id)
    }

    /// Runs the caption encoder from a zero state over `tokens`.
    pub fn encode_caption(&self, g: &mut Graph, b: &Binding, tokens: &[usize]) -> Result<EncodedCaption> {
        if tokens.is_empty() {
            return Err(Error::Empty("input caption"));
        }
        let mut state = LstmState::zeros(g, self.config.hidden_dim)?;
        let mut hs = Vec::with_capacity(tokens.len());
        let mut cs = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let x = self.embed_token(g, b, t)?;
            state = lstm_step(g, b, &self.encoder, x, &state)?;
            hs.push(state.h);
            cs.push(state.c);
        }
        Ok(EncodedCaption {
            states: g.stack(&hs)?,
            memories: g.stack(&cs)?,
            last: state.h,
            len: tokens.len(),
        })
    }

    pub fn prepare(
        &self,
        g: &mut Graph,
        b: &Binding,
        tokens: &[usize],
        features: &VisualFeatures,
    ) -> Result<EditNetContext> {
        let encoded = self.encode_caption(g, b, tokens)?;
        let text_keys = project_keys(g, b, &self.text_attn, encoded.states)?;
        let visual = match &self.visual_attn {
            Some(w) => {
                if features.dim() != self.config.d_v {
                    return Err(Error::ShapeMismatch {
                        op: "visual features",
                        lhs: vec![self.config.d_v],
                        rhs: vec![features.k(), features.dim()],
                    });
                }
                let rows = g.constant(features.rows().clone())?;
                let mean = g.constant(Tensor::vector(features.mean().to_vec())?)?;
                Some((project_keys(g, b, w, rows)?, mean))
            }
            None => None,
        };
        Ok(EditNetContext {
            input: tokens.to_vec(),
            encoded,
            text_keys,
            visual,
        })
    }

    pub fn initial_state(&self, g: &mut Graph) -> Result<EditNetState> {
        let h = self.config.hidden_dim;
        Ok(EditNetState {
            att: LstmState::zeros(g, h)?,
            lang: LstmState::zeros(g, h)?,
        })
    }

    /// One decoder step on previous word `prev`; returns vocabulary logits.
    pub fn step(
        &self,
        g: &mut Graph,
        b: &Binding,
        ctx: &EditNetContext,
        state: &EditNetState,
        prev: usize,
    ) -> Result<(Var, EditNetState, StepTrace)> {
        let w = self.embed_token(g, b, prev)?;
        let mut x1 = vec![w, ctx.encoded.last];
        if let Some((_, mean)) = ctx.visual {
            x1.push(mean);
        }
        x1.push(state.lang.h);
        let x1 = g.concat(&x1)?;
        let att = lstm_step(g, b, &self.att_lstm, x1, &state.att)?;

        let alpha = attention_weights(g, b, &self.text_attn, &ctx.text_keys, att.h)?;
        let mode = if self.config.hard_scma {
            ScmaMode::Hard
        } else {
            ScmaMode::Soft
        };
        let scma = scma_select(g, alpha, ctx.encoded.memories, mode)?;
        let c_t = soft_attend(g, alpha, ctx.encoded.states)?;
        let (c_m, gate) = match &self.gate {
            Some(cg) => {
                let out = context_gate(g, b, cg, w, att.h, c_t, self.context_gate_mode)?;
                (out.mixed, Some(out.gate))
            }
            None => (c_t, None),
        };
        let mut x2 = vec![att.h];
        if let (Some(wv), Some((keys, _))) = (&self.visual_attn, &ctx.visual) {
            let (v_hat, _) = visual_attend(g, b, wv, att.h, keys)?;
            x2.push(v_hat);
        }
        x2.push(c_m);
        let x2 = g.concat(&x2)?;
        let out = copy_lstm_step(g, b, &self.lang, x2, &state.lang, scma.copied, self.copy_gate)?;
        let logits = g.matmul(b.get(self.w_out), out.state.h)?;
        let logits = g.add(logits, b.get(self.b_out))?;

        let mean_of = |g: &Graph, v: Var| {
            let d = g.value(v).data();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let trace = StepTrace {
            selected: scma.selected,
            alpha_max: g.value(alpha).data()[scma.selected],
            copy_gate_mean: mean_of(g, out.copy_gate),
            context_gate_mean: gate.map(|z| mean_of(g, z)),
        };
        Ok((
            logits,
            EditNetState {
                att,
                lang: out.state,
            },
            trace,
        ))
    }

    /// Linear map of a decoder hidden state into the DCNet code space.
    pub fn project_hidden(&self, g: &mut Graph, b: &Binding, h: Var) -> Result<Var> {
        let p = g.matmul(b.get(self.w_d), h)?;
        g.add(p, b.get(self.b_d))
    }
}
