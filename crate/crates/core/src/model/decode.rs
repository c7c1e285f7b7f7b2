use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{DcNet, DcNetContext, DcNetState, EditNet, EditNetContext, EditNetState, StepTrace};
use super::VisualFeatures;
use crate::autodiff::{argmax, softmax, Graph, Var};
use crate::data::{Vocab, END, START};
use crate::error::{Error, Result};
use crate::params::Binding;

/// Arithmetic mean of two distributions.
pub fn fuse_distributions(p_edit: &[f64], p_dc: &[f64]) -> Result<Vec<f64>> {
    if p_edit.len() != p_dc.len() {
        return Err(Error::LengthMismatch {
            op: "fuse_distributions",
            left: p_edit.len(),
            right: p_dc.len(),
        });
    }
    for p in [p_edit, p_dc] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("distribution sums to {s}")));
        }
    }
    Ok(p_edit.iter().zip(p_dc).map(|(a, b)| (a + b) / 2.0).collect())
}

struct EditPart<'a> {
    model: &'a EditNet,
    binding: &'a Binding,
    ctx: EditNetContext,
    state: EditNetState,
}

struct DcPart<'a> {
    model: &'a DcNet,
    binding: &'a Binding,
    ctx: DcNetContext,
    state: DcNetState,
}

/// Output of one session step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub edit_logits: Option<Var>,
    pub dc_logits: Option<Var>,
    pub trace: Option<StepTrace>,
}

/// Decoding state of EditNet, DCNet, or both over one input caption.
///
/// The source sequence fed to both encoders is the existing caption
/// followed by `<end>`.
pub struct DecodeSession<'a> {
    edit: Option<EditPart<'a>>,
    dc: Option<DcPart<'a>>,
    step: usize,
}

/// Teacher-forced run over a framed target.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub targets: Vec<usize>,
    pub inputs: Vec<usize>,
    pub steps: Vec<StepOutput>,
    pub last_edit_hidden: Option<Var>,
    pub last_dc_hidden: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentStep {
    pub step: usize,
    pub emitted: usize,
    /// Input-caption token at the copied position.
    pub argmax_input: Option<usize>,
    pub alpha_max: f64,
    pub copy_gate_mean: f64,
}

impl AlignmentStep {
    /// `step  emitted  argmax_input  alpha_max  copy_gate_mean`, tab separated.
    pub fn line(&self, vocab: &Vocab) -> String {
        let input = self.argmax_input.map_or("-", |i| vocab.token(i));
        format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}",
            self.step,
            vocab.token(self.emitted),
            input,
            self.alpha_max,
            self.copy_gate_mean
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted tokens without the terminating `<end>`.
    pub tokens: Vec<usize>,
    pub alignment: Vec<AlignmentStep>,
}

impl Decoded {
    pub fn mean_copy_gate(&self) -> f64 {
        if self.alignment.is_empty() {
            return 0.0;
        }
        self.alignment.iter().map(|a| a.copy_gate_mean).sum::<f64>() / self.alignment.len() as f64
    }
}

pub fn source_ids(existing: &[usize]) -> Vec<usize> {
    let mut v = existing.to_vec();
    v.push(END);
    v
}

impl<'a> DecodeSession<'a> {
    pub fn new(
        g: &mut Graph,
        edit: Option<(&'a EditNet, &'a Binding)>,
        dc: Option<(&'a DcNet, &'a Binding)>,
        existing: &[usize],
        features: &VisualFeatures,
    ) -> Result<Self> {
        if edit.is_none() && dc.is_none() {
            return Err(Error::Invalid("decode session needs at least one model".into()));
        }
        let src = source_ids(existing);
        let edit = match edit {
            Some((model, binding)) => Some(EditPart {
                ctx: model.prepare(g, binding, &src, features)?,
                state: model.initial_state(g)?,
                model,
                binding,
            }),
            None => None,
        };
        let dc = match dc {
            Some((model, binding)) => Some(DcPart {
                ctx: model.prepare(g, binding, &src)?,
                state: model.initial_state(g)?,
                model,
                binding,
            }),
            None => None,
        };
        Ok(DecodeSession { edit, dc, step: 0 })
    }

    pub fn source(&self) -> &[usize] {
        match (&self.edit, &self.dc) {
            (Some(e), _) => &e.ctx.input,
            (None, Some(d)) => &d.ctx.input,
            (None, None) => &[],
        }
    }

    pub fn edit_hidden(&self) -> Option<Var> {
        self.edit.as_ref().map(|e| e.state.lang.h)
    }

    pub fn dc_hidden(&self) -> Option<Var> {
        self.dc.as_ref().map(|d| d.state.lang.h)
    }

    /// Advances every model by one step on `prev`.
    pub fn step(&mut self, g: &mut Graph, prev: usize) -> Result<StepOutput> {
        let t = self.step;
        self.step += 1;
        self.step_inner(g, prev).map_err(|e| e.at_step(t))
    }

    fn step_inner(&mut self, g: &mut Graph, prev: usize) -> Result<StepOutput> {
        let mut out = StepOutput {
            edit_logits: None,
            dc_logits: None,
            trace: None,
        };
        if let Some(e) = &mut self.edit {
            let (l, s, tr) = e.model.step(g, e.binding, &e.ctx, &e.state, prev)?;
            e.state = s;
            out.edit_logits = Some(l);
            out.trace = Some(tr);
        }
        if let Some(d) = &mut self.dc {
            let (l, s) = d.model.step(g, d.binding, &d.ctx, &d.state, prev)?;
            d.state = s;
            out.dc_logits = Some(l);
        }
        Ok(out)
    }
}

impl StepOutput {
    /// Output distribution as plain values, fused when both models ran.
    pub fn probabilities(&self, g: &Graph) -> Result<Vec<f64>> {
        match (self.edit_logits, self.dc_logits) {
            (Some(e), Some(d)) => {
                fuse_distributions(&softmax(g.value(e).data()), &softmax(g.value(d).data()))
            }
            (Some(l), None) | (None, Some(l)) => Ok(softmax(g.value(l).data())),
            (None, None) => Err(Error::Empty("step output")),
        }
    }

    /// Log-probability vector on the tape.
    pub fn log_probs(&self, g: &mut Graph) -> Result<Var> {
        match (self.edit_logits, self.dc_logits) {
            (Some(e), Some(d)) => {
                let pe = g.softmax(e)?;
                let pd = g.softmax(d)?;
                let s = g.add(pe, pd)?;
                let p = g.affine(s, 0.5, 0.0)?;
                g.log(p)
            }
            (Some(l), None) | (None, Some(l)) => g.log_softmax(l),
            (None, None) => Err(Error::Empty("step output")),
        }
    }

    fn alignment(&self, step: usize, emitted: usize, source: &[usize]) -> AlignmentStep {
        match self.trace {
            Some(tr) => AlignmentStep {
                step,
                emitted,
                argmax_input: source.get(tr.selected).copied(),
                alpha_max: tr.alpha_max,
                copy_gate_mean: tr.copy_gate_mean,
            },
            None => AlignmentStep {
                step,
                emitted,
                argmax_input: None,
                alpha_max: f64::NAN,
                copy_gate_mean: f64::NAN,
            },
        }
    }
}

/// Feeds `<start> y_1 .. y_T` and records the outputs predicting
/// `y_1 .. y_T <end>`. With probability `ss_prob` each input after the first
/// is replaced by the previous step's argmax.
pub fn teacher_forced<R: Rng>(
    g: &mut Graph,
    session: &mut DecodeSession<'_>,
    framed: &[usize],
    ss_prob: f64,
    rng: &mut R,
) -> Result<TeacherForced> {
    if framed.len() < 2 || framed[0] != START {
        return Err(Error::Invalid("target must be framed by <start> and <end>".into()));
    }
    let targets = framed[1..].to_vec();
    let mut inputs = Vec::with_capacity(targets.len());
    let mut steps = Vec::with_capacity(targets.len());
    let mut prev_out: Option<StepOutput> = None;
    for &gold in &framed[..framed.len() - 1] {
        let input = match prev_out {
            Some(o) if ss_prob > 0.0 && rng.random::<f64>() < ss_prob => argmax(&o.probabilities(g)?),
            _ => gold,
        };
        let out = session.step(g, input)?;
        inputs.push(input);
        steps.push(out);
        prev_out = Some(out);
    }
    Ok(TeacherForced {
        targets,
        inputs,
        steps,
        last_edit_hidden: session.edit_hidden(),
        last_dc_hidden: session.dc_hidden(),
    })
}

pub fn greedy_decode(g: &mut Graph, session: &mut DecodeSession<'_>, max_len: usize) -> Result<Decoded> {
    let source = session.source().to_vec();
    let mut prev = START;
    let mut tokens = Vec::new();
    let mut alignment = Vec::new();
    for t in 0..max_len {
        let out = session.step(g, prev)?;
        let next = argmax(&out.probabilities(g)?);
        alignment.push(out.alignment(t, next, &source));
        if next == END {
            break;
        }
        tokens.push(next);
        prev = next;
    }
    Ok(Decoded { tokens, alignment })
}

/// Sampled caption and the per-step log-probabilities of the sampled
/// tokens (including a sampled `<end>`), kept on the tape.
pub fn sample_decode<R: Rng>(
    g: &mut Graph,
    session: &mut DecodeSession<'_>,
    max_len: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<Var>)> {
    let mut prev = START;
    let mut tokens = Vec::new();
    let mut logps = Vec::new();
    for _ in 0..max_len {
        let out = session.step(g, prev)?;
        let p = out.probabilities(g)?;
        let dist = WeightedIndex::new(&p)
            .map_err(|e| Error::Invalid(format!("cannot sample from distribution: {e}")))?;
        let next = dist.sample(rng);
        let lp = out.log_probs(g)?;
        logps.push(g.index(lp, next)?);
        if next == END {
            break;
        }
        tokens.push(next);
        prev = next;
    }
    Ok((tokens, logps))
}
