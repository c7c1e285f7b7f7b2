//! Finite-difference checks over every primitive, the cells, the attention
//! blocks, and the full teacher-forced model losses at tiny dimensions.

use std::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    additive_attention, context_gate, project_keys, scma_select, visual_attend, AdditiveAttentionWeights,
    ContextGateWeights, ScmaMode,
};
use crate::autodiff::{finite_diff_check_with, GradCheckOptions, GradCheckReport, Graph, OpKind, Tensor, Var};
use crate::cells::{copy_lstm_step, lstm_step, CopyLstmWeights, GateMode, LstmState};
use crate::data::frame;
use crate::error::{Error, Result};
use crate::model::{teacher_forced, DcNet, DecodeSession, EditNet, ModelConfig, VisualFeatures};
use crate::objectives::{combined_loss, hidden_mse_loss, xe_loss};
use crate::params::{uniform_matrix, uniform_vector, Binding, ParamSet};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }
}

type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Weighted sum of `out` against a fixed probe, turning any tensor into a
/// scalar with a generic upstream gradient.
fn probe_sum(g: &mut Graph, out: Var, probe: &Tensor) -> Result<Var> {
    let p = g.constant(probe.clone())?;
    let s = g.mul(out, p)?;
    g.sum(s)
}

fn probe_for(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform_vector(rng, n, 1.0).into_data()).expect("probe shape")
}

fn positive(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut t = uniform_vector(rng, n, 1.0);
    t.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
    t
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Loss) {
    let v3 = uniform_vector(rng, 3, 1.0);
    let w3 = uniform_vector(rng, 3, 1.0);
    let m23 = uniform_matrix(rng, 2, 3);
    let p3 = probe_for(&[3], rng);
    let p2 = probe_for(&[2], rng);
    let p23 = probe_for(&[2, 3], rng);
    let p6 = probe_for(&[6], rng);
    let p43 = probe_for(&[4, 3], rng);
    match kind {
        OpKind::MatMul => (vec![m23, v3], Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_sum(g, y, &p2)
        })),
        OpKind::Add => (vec![v3, w3], Box::new(move |g, v| {
            let y = g.add(v[0], v[1])?;
            probe_sum(g, y, &p3)
        })),
        OpKind::Sub => (vec![v3, w3], Box::new(move |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe_sum(g, y, &p3)
        })),
        OpKind::Mul => (vec![v3, w3], Box::new(move |g, v| {
            let y = g.mul(v[0], v[1])?;
            let y = g.mul(y, v[1])?;
            g.sum(y)
        })),
        OpKind::Affine => (vec![v3], Box::new(move |g, v| {
            let y = g.affine(v[0], -1.7, 0.3)?;
            probe_sum(g, y, &p3)
        })),
        OpKind::Concat => (vec![v3, w3], Box::new(move |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            probe_sum(g, y, &p6)
        })),
        OpKind::Stack => (vec![v3, w3], Box::new(move |g, v| {
            let y = g.stack(&[v[0], v[1]])?;
            probe_sum(g, y, &p23)
        })),
        OpKind::Slice => (vec![v3], Box::new(move |g, v| {
            let y = g.slice(v[0], 1, 3)?;
            probe_sum(g, y, &p2)
        })),
        OpKind::Index => (vec![v3], Box::new(move |g, v| {
            let a = g.index(v[0], 2)?;
            let b = g.index(v[0], 0)?;
            let b = g.affine(b, 0.4, 0.0)?;
            g.add(a, b)
        })),
        OpKind::EmbeddingLookup => (vec![m23], Box::new(move |g, v| {
            let y = g.embedding_lookup(v[0], 1)?;
            probe_sum(g, y, &p3)
        })),
        OpKind::RepeatRows => (vec![v3], Box::new(move |g, v| {
            let y = g.repeat_rows(v[0], 4)?;
            probe_sum(g, y, &p43)
        })),
        OpKind::Tanh => (vec![v3], Box::new(move |g, v| {
            let y = g.tanh(v[0])?;
            probe_sum(g, y, &p3)
        })),
        OpKind::Sigmoid => (vec![v3], Box::new(move |g, v| {
            let y = g.sigmoid(v[0])?;
            probe_sum(g, y, &p3)
        })),
        OpKind::Log => (vec![positive(rng, 3)], Box::new(move |g, v| {
            let y = g.log(v[0])?;
            probe_sum(g, y, &p3)
        })),
        OpKind::Exp => (vec![v3], Box::new(move |g, v| {
            let y = g.exp(v[0])?;
            probe_sum(g, y, &p3)
        })),
        OpKind::Sum => (vec![v3], Box::new(move |g, v| {
            let y = g.sum(v[0])?;
            g.affine(y, 2.5, 0.0)
        })),
        OpKind::Mean => (vec![m23], Box::new(move |g, v| {
            let y = g.mean(v[0])?;
            g.affine(y, -3.0, 0.0)
        })),
        OpKind::SqDiff => (vec![v3, w3], Box::new(move |g, v| {
            let y = g.sq_diff(v[0], v[1])?;
            probe_sum(g, y, &p3)
        })),
        OpKind::Softmax => (vec![v3], Box::new(move |g, v| {
            let y = g.softmax(v[0])?;
            probe_sum(g, y, &p3)
        })),
        OpKind::LogSoftmax => (vec![v3], Box::new(move |g, v| {
            let y = g.log_softmax(v[0])?;
            probe_sum(g, y, &p3)
        })),
        OpKind::Leaf | OpKind::StopGradient => (vec![v3], Box::new(move |g, v| {
            let s = g.stop_gradient(v[0])?;
            let y = g.mul(v[0], s)?;
            probe_sum(g, y, &p3)
        })),
    }
}

fn cells_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Loss) {
    let (input, hidden) = (3, 4);
    let mut ps = ParamSet::new();
    let w = CopyLstmWeights::new(&mut ps, rng, "cell", input, hidden);
    let n = ps.len();
    let mut params = ps.tensors().to_vec();
    params.push(uniform_vector(rng, input, 1.0));
    params.push(uniform_vector(rng, hidden, 1.0));
    params.push(uniform_vector(rng, hidden, 1.0));
    params.push(uniform_vector(rng, hidden, 2.0));
    let probe = probe_for(&[hidden], rng);
    let f = move |g: &mut Graph, v: &[Var]| {
        let b = Binding::from_vars(v[..n].to_vec());
        let prev = LstmState { h: v[n + 1], c: v[n + 2] };
        let plain = lstm_step(g, &b, &w.lstm, v[n], &prev)?;
        let copy = copy_lstm_step(g, &b, &w, v[n], &plain, v[n + 3], GateMode::Learned)?;
        let s = g.add(copy.state.h, copy.state.c)?;
        probe_sum(g, s, &probe)
    };
    (params, Box::new(f))
}

fn attention_case(rng: &mut ChaCha8Rng, visual: bool) -> (Vec<Tensor>, Loss) {
    let (keys, key_dim, query_dim, attn) = (4, 3, 2, 5);
    let mut ps = ParamSet::new();
    let w = AdditiveAttentionWeights::new(&mut ps, rng, "attn", key_dim, query_dim, attn);
    let n = ps.len();
    let mut params = ps.tensors().to_vec();
    params.push(uniform_matrix(rng, keys, key_dim));
    params.push(uniform_vector(rng, query_dim, 1.0));
    let probe = probe_for(&[if visual { key_dim } else { keys }], rng);
    let f = move |g: &mut Graph, v: &[Var]| {
        let b = Binding::from_vars(v[..n].to_vec());
        let out = if visual {
            let pk = project_keys(g, &b, &w, v[n])?;
            visual_attend(g, &b, &w, v[n + 1], &pk)?.0
        } else {
            additive_attention(g, &b, &w, v[n + 1], v[n])?
        };
        probe_sum(g, out, &probe)
    };
    (params, Box::new(f))
}

fn gate_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Loss) {
    let (word, hidden, ctx, out) = (2, 3, 3, 3);
    let mut ps = ParamSet::new();
    let w = ContextGateWeights::new(&mut ps, rng, "gate", word, hidden, ctx, out);
    let n = ps.len();
    let mut params = ps.tensors().to_vec();
    params.push(uniform_vector(rng, word, 1.0));
    params.push(uniform_vector(rng, hidden, 1.0));
    params.push(uniform_vector(rng, ctx, 2.0));
    let probe = probe_for(&[out], rng);
    let f = move |g: &mut Graph, v: &[Var]| {
        let b = Binding::from_vars(v[..n].to_vec());
        let o = context_gate(g, &b, &w, v[n], v[n + 1], v[n + 2], GateMode::Learned)?;
        probe_sum(g, o.mixed, &probe)
    };
    (params, Box::new(f))
}

/// Attention logits with a clear winner, so perturbations rarely move the
/// argmax; any that do are skipped by the checker.
fn scma_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Loss) {
    let mut scores = uniform_vector(rng, 5, 1.0);
    scores.data_mut()[2] += 2.0;
    let memories = uniform_matrix(rng, 5, 4);
    let probe = probe_for(&[4], rng);
    let probe_a = probe_for(&[5], rng);
    let f = move |g: &mut Graph, v: &[Var]| {
        let alpha = g.softmax(v[0])?;
        let out = scma_select(g, alpha, v[1], ScmaMode::Hard)?;
        let a = probe_sum(g, out.copied, &probe)?;
        let sq = g.mul(out.copied, out.copied)?;
        let b = g.sum(sq)?;
        let c = probe_sum(g, alpha, &probe_a)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    };
    (vec![scores, memories], Box::new(f))
}

fn tiny_features(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> VisualFeatures {
    let rows: Vec<Vec<f64>> = (0..cfg.k).map(|_| uniform_vector(rng, cfg.d_v, 1.0).into_data()).collect();
    VisualFeatures::new(&rows).expect("non-empty features")
}

const EXISTING: [usize; 4] = [4, 7, 5, 9];
const TRUTH: [usize; 3] = [4, 8, 5];

fn editnet_case(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor>, Loss)> {
    let m = EditNet::new(cfg, rng)?;
    let feats = tiny_features(cfg, rng);
    let params = m.params.tensors().to_vec();
    let f = move |g: &mut Graph, v: &[Var]| {
        let b = Binding::from_vars(v.to_vec());
        let mut s = DecodeSession::new(g, Some((&m, &b)), None, &EXISTING, &feats)?;
        let tf = teacher_forced(g, &mut s, &frame(&TRUTH), 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
        let logits: Vec<Var> = tf.steps.iter().filter_map(|o| o.edit_logits).collect();
        xe_loss(g, &logits, &tf.targets)
    };
    Ok((params, Box::new(f)))
}

fn dcnet_case(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor>, Loss)> {
    let m = DcNet::new(cfg, rng)?;
    let feats = tiny_features(cfg, rng);
    let params = m.params.tensors().to_vec();
    let f = move |g: &mut Graph, v: &[Var]| {
        let b = Binding::from_vars(v.to_vec());
        let mut target_src = TRUTH.to_vec();
        target_src.push(crate::data::END);
        let (_, code) = m.encode(g, &b, &target_src)?;
        let target = g.stop_gradient(code)?;
        let mut s = DecodeSession::new(g, None, Some((&m, &b)), &EXISTING, &feats)?;
        let tf = teacher_forced(g, &mut s, &frame(&TRUTH), 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
        let logits: Vec<Var> = tf.steps.iter().filter_map(|o| o.dc_logits).collect();
        let xe = xe_loss(g, &logits, &tf.targets)?;
        let h = tf.last_dc_hidden.expect("dcnet session");
        let p = m.project_hidden(g, &b, h)?;
        let mse = hidden_mse_loss(g, p, target)?;
        combined_loss(g, xe, mse)
    };
    Ok((params, Box::new(f)))
}

/// Runs every check. Fails only on construction errors; gradient
/// disagreements are reported per entry.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, Vec<Tensor>, Loss)> = Vec::new();
    for kind in OpKind::DIFFERENTIABLE.into_iter().chain([OpKind::StopGradient]) {
        let (p, f) = op_case(kind, &mut rng);
        cases.push((format!("op.{}", kind.name()), p, f));
    }
    let (p, f) = cells_case(&mut rng);
    cases.push(("cells.lstm+copy_lstm".into(), p, f));
    let (p, f) = attention_case(&mut rng, false);
    cases.push(("attention.additive".into(), p, f));
    let (p, f) = attention_case(&mut rng, true);
    cases.push(("attention.visual".into(), p, f));
    let (p, f) = gate_case(&mut rng);
    cases.push(("attention.context_gate".into(), p, f));
    let (p, f) = scma_case(&mut rng);
    cases.push(("attention.scma_hard".into(), p, f));
    let cfg = ModelConfig::tiny(12);
    let (p, f) = editnet_case(&cfg, &mut rng)?;
    cases.push(("model.editnet_xe".into(), p, f));
    let (p, f) = dcnet_case(&cfg, &mut rng)?;
    cases.push(("model.dcnet_xe_mse".into(), p, f));

    let opts = GradCheckOptions::default();
    cases
        .into_iter()
        .map(|(name, params, f)| {
            let report = finite_diff_check_with(f, &params, &opts)
                .map_err(|e| Error::Invalid(format!("{name}: {e}")))?;
            Ok(SuiteEntry { name, report })
        })
        .collect()
}

/// One tab-separated line per entry plus a summary line.
pub fn format_suite(entries: &[SuiteEntry]) -> String {
    let mut out = String::from("check\tmax_rel_error\tresolved_rel_error\tchecked\tskipped\tnoise_limited\tstatus\n");
    for e in entries {
        let r = &e.report;
        let _ = writeln!(
            out,
            "{}\t{:.3e}\t{:.3e}\t{}\t{}\t{}\t{}",
            e.name,
            r.max_rel_error,
            r.max_resolved_rel_error,
            r.checked,
            r.skipped,
            r.noise_limited,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        let worst = entries.iter().map(|e| e.report.max_resolved_rel_error).fold(0.0, f64::max);
        let _ = writeln!(out, "all {} checks passed (worst {:.3e} < {:.0e})", entries.len(), worst, TOLERANCE);
    } else {
        let _ = writeln!(out, "FAILED: {}", failed.join(", "));
    }
    out
}
