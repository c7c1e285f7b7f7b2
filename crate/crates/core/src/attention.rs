//! Additive attention, selective copy of encoder memories, and the context
//! gate that mixes attended text with the decoder's own context.

use rand::Rng;

use crate::autodiff::{argmax, Graph, Tensor, Var};
use crate::cells::GateMode;
use crate::error::{Error, Result};
use crate::params::{uniform_matrix, uniform_vector, Binding, ParamId, ParamSet};

/// `softmax(w_a^T tanh(K W_s + W_h q))` over the rows of `K`.
///
/// `w_s` is stored as `[key_dim, attn_dim]` so a whole key matrix is
/// projected by one matmul; `w_h` is `[attn_dim, query_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveAttentionWeights {
    pub w_s: ParamId,
    pub w_h: ParamId,
    pub w_a: ParamId,
    pub key_dim: usize,
    pub query_dim: usize,
    pub attn_dim: usize,
}

impl AdditiveAttentionWeights {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        key_dim: usize,
        query_dim: usize,
        attn_dim: usize,
    ) -> Self {
        let bound_k = 1.0 / (key_dim as f64).sqrt();
        let w_s_data = uniform_vector(rng, key_dim * attn_dim, bound_k).into_data();
        let w_s = params.add(
            format!("{prefix}.w_s"),
            Tensor::from_parts(vec![key_dim, attn_dim], w_s_data),
        );
        let w_h = params.add(format!("{prefix}.w_h"), uniform_matrix(rng, attn_dim, query_dim));
        let w_a = params.add(
            format!("{prefix}.w_a"),
            uniform_vector(rng, attn_dim, 1.0 / (attn_dim as f64).sqrt()),
        );
        AdditiveAttentionWeights {
            w_s,
            w_h,
            w_a,
            key_dim,
            query_dim,
            attn_dim,
        }
    }
}

/// Keys with their projection, computed once per sequence and reused at
/// every decode step.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedKeys {
    pub keys: Var,
    pub projected: Var,
    pub len: usize,
}

pub fn project_keys(
    g: &mut Graph,
    b: &Binding,
    w: &AdditiveAttentionWeights,
    keys: Var,
) -> Result<ProjectedKeys> {
    let shape = g.value(keys).shape().to_vec();
    match shape.as_slice() {
        &[n, d] if d == w.key_dim => {
            let projected = g.matmul(keys, b.get(w.w_s))?;
            Ok(ProjectedKeys {
                keys,
                projected,
                len: n,
            })
        }
        &[_, _] => Err(Error::ShapeMismatch {
            op: "additive_attention",
            lhs: vec![w.key_dim],
            rhs: shape,
        }),
        _ => Err(Error::Empty("additive_attention keys")),
    }
}

/// Attention distribution of `query` over pre-projected keys.
pub fn attention_weights(
    g: &mut Graph,
    b: &Binding,
    w: &AdditiveAttentionWeights,
    keys: &ProjectedKeys,
    query: Var,
) -> Result<Var> {
    let q = g.matmul(b.get(w.w_h), query)?;
    let q = g.repeat_rows(q, keys.len)?;
    let pre = g.add(keys.projected, q)?;
    let act = g.tanh(pre)?;
    let scores = g.matmul(act, b.get(w.w_a))?;
    g.softmax(scores)
}

/// `keys` is an `[n, key_dim]` matrix; returns the length-`n` distribution.
pub fn additive_attention(
    g: &mut Graph,
    b: &Binding,
    w: &AdditiveAttentionWeights,
    query: Var,
    keys: Var,
) -> Result<Var> {
    let pk = project_keys(g, b, w, keys)?;
    attention_weights(g, b, w, &pk, query)
}

/// Binary and shifting masks of hard selection.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmaMasks {
    pub binary: Vec<f64>,
    pub shift: Vec<f64>,
    pub selected: usize,
}

impl ScmaMasks {
    /// `m_b` is one at the argmax (lowest index on ties); `m_s` holds
    /// `1 - alpha_max` there and zero elsewhere.
    pub fn from_weights(alpha: &[f64]) -> Self {
        let selected = argmax(alpha);
        let mut binary = vec![0.0; alpha.len()];
        let mut shift = vec![0.0; alpha.len()];
        binary[selected] = 1.0;
        shift[selected] = 1.0 - alpha[selected];
        ScmaMasks {
            binary,
            shift,
            selected,
        }
    }

    /// `alpha * m_b + m_s`, elementwise.
    pub fn coefficients(&self, alpha: &[f64]) -> Vec<f64> {
        alpha
            .iter()
            .zip(&self.binary)
            .zip(&self.shift)
            .map(|((a, b), s)| a * b + s)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScmaMode {
    /// Copy exactly the argmax memory with straight-through gradients.
    #[default]
    Hard,
    /// Ablation: attention-weighted mixture of all memories.
    Soft,
}

#[derive(Clone, Copy, Debug)]
pub struct ScmaOutput {
    pub copied: Var,
    pub selected: usize,
}

/// Copies one row of `memories` (`[n, hidden]`) chosen by `alpha`.
///
/// In hard mode the masks are constants built from the current value of
/// `alpha`, so the forward value is the argmax memory and gradient reaches
/// only that memory and the argmax weight.
pub fn scma_select(
    g: &mut Graph,
    alpha: Var,
    memories: Var,
    mode: ScmaMode,
) -> Result<ScmaOutput> {
    let n = g.value(alpha).numel();
    let rows = g.value(memories).shape().first().copied().unwrap_or(0);
    if g.value(memories).rank() != 2 || rows != n {
        return Err(Error::LengthMismatch {
            op: "scma_select",
            left: n,
            right: rows,
        });
    }
    let masks = ScmaMasks::from_weights(g.value(alpha).data());
    g.record_decision(masks.selected);
    let coef = match mode {
        ScmaMode::Hard => {
            let mb = g.pinned(Tensor::from_parts(vec![n], masks.binary))?;
            let ms = g.pinned(Tensor::from_parts(vec![n], masks.shift))?;
            let kept = g.mul(alpha, mb)?;
            g.add(kept, ms)?
        }
        ScmaMode::Soft => alpha,
    };
    let copied = g.matmul(coef, memories)?;
    Ok(ScmaOutput {
        copied,
        selected: masks.selected,
    })
}

/// `sum_i alpha_i * values_i` over the rows of `values`.
pub fn soft_attend(g: &mut Graph, alpha: Var, values: Var) -> Result<Var> {
    let n = g.value(alpha).numel();
    let rows = g.value(values).shape().first().copied().unwrap_or(0);
    if g.value(values).rank() != 2 || rows != n {
        return Err(Error::LengthMismatch {
            op: "soft_attend",
            left: n,
            right: rows,
        });
    }
    g.matmul(alpha, values)
}

/// Context gate: `w_src` projects the attended text (`[hidden, ctx_dim]`),
/// `w_tgt` projects `[w_t; h_t]`, and `w_z` produces the gate from
/// `[w_t; h_t; c_t]`. None carry a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextGateWeights {
    pub w_src: ParamId,
    pub w_tgt: ParamId,
    pub w_z: ParamId,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub ctx_dim: usize,
}

impl ContextGateWeights {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        word_dim: usize,
        hidden_dim: usize,
        ctx_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w_src = params.add(format!("{prefix}.w_src"), uniform_matrix(rng, out_dim, ctx_dim));
        let w_tgt = params.add(
            format!("{prefix}.w_tgt"),
            uniform_matrix(rng, out_dim, word_dim + hidden_dim),
        );
        let w_z = params.add(
            format!("{prefix}.w_z"),
            uniform_matrix(rng, out_dim, word_dim + hidden_dim + ctx_dim),
        );
        ContextGateWeights {
            w_src,
            w_tgt,
            w_z,
            word_dim,
            hidden_dim,
            ctx_dim,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContextGateOutput {
    pub mixed: Var,
    pub gate: Var,
}

/// `c_m = z * tanh(W_src c_t) + (1 - z) * tanh(W_tgt [w_t; h_t])` with
/// `z = sigmoid(W_z [w_t; h_t; c_t])`.
pub fn context_gate(
    g: &mut Graph,
    b: &Binding,
    w: &ContextGateWeights,
    word: Var,
    hidden: Var,
    ctx: Var,
    mode: GateMode,
) -> Result<ContextGateOutput> {
    for (v, d) in [(word, w.word_dim), (hidden, w.hidden_dim), (ctx, w.ctx_dim)] {
        let t = g.value(v);
        if t.rank() != 1 || t.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "context_gate",
                lhs: vec![d],
                rhs: t.shape().to_vec(),
            });
        }
    }
    let target_in = g.concat(&[word, hidden])?;
    let z = match mode {
        GateMode::Learned => {
            let all = g.concat(&[word, hidden, ctx])?;
            let z = g.matmul(b.get(w.w_z), all)?;
            g.sigmoid(z)?
        }
        GateMode::Fixed(v) => {
            let out_dim = g.value(b.get(w.w_src)).shape()[0];
            g.constant(Tensor::filled(&[out_dim], v))?
        }
    };
    let src = g.matmul(b.get(w.w_src), ctx)?;
    let src = g.tanh(src)?;
    let tgt = g.matmul(b.get(w.w_tgt), target_in)?;
    let tgt = g.tanh(tgt)?;
    let a = g.mul(z, src)?;
    let zc = g.one_minus(z)?;
    let c = g.mul(zc, tgt)?;
    let mixed = g.add(a, c)?;
    Ok(ContextGateOutput { mixed, gate: z })
}

/// Attention over visual feature rows with its own additive weights;
/// returns the attended vector and the weights.
pub fn visual_attend(
    g: &mut Graph,
    b: &Binding,
    w: &AdditiveAttentionWeights,
    query: Var,
    features: &ProjectedKeys,
) -> Result<(Var, Var)> {
    if features.len == 0 {
        return Err(Error::Empty("visual_attend"));
    }
    let alpha = attention_weights(g, b, w, features, query)?;
    let attended = g.matmul(alpha, features.keys)?;
    Ok((attended, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attn(seed: u64, key: usize, query: usize, a: usize) -> (ParamSet, AdditiveAttentionWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = AdditiveAttentionWeights::new(&mut ps, &mut rng, "att", key, query, a);
        (ps, w)
    }

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (ps, w) = attn(0, 3, 2, 4);
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let q = g.constant(Tensor::vector(vec![0.3, -0.1]).unwrap()).unwrap();
        let k = g.constant(mat(&[vec![1.0, 2.0, 3.0]])).unwrap();
        let a = additive_attention(&mut g, &b, &w, q, k).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (ps, w) = attn(1, 2, 2, 3);
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let q = g.constant(Tensor::vector(vec![0.9, 0.4]).unwrap()).unwrap();
        let row = vec![0.2, -0.7];
        let k = g.constant(mat(&[row.clone(), row.clone(), row])).unwrap();
        let a = additive_attention(&mut g, &b, &w, q, k).unwrap();
        for &v in g.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_key_width_rejected() {
        let (ps, w) = attn(1, 2, 2, 3);
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let q = g.constant(Tensor::vector(vec![0.9, 0.4]).unwrap()).unwrap();
        let k = g.constant(mat(&[vec![1.0, 2.0, 3.0]])).unwrap();
        assert!(additive_attention(&mut g, &b, &w, q, k).is_err());
    }

    #[test]
    fn attention_gradient_through_query_and_keys() {
        let (ps, w) = attn(4, 3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ps.tensors().to_vec();
        params.push(uniform_matrix(&mut rng, 4, 3));
        params.push(uniform_vector(&mut rng, 2, 1.0));
        let probe = uniform_vector(&mut rng, 4, 1.0);
        let report = finite_diff_check(
            |g: &mut Graph, v: &[Var]| {
                let b = Binding::from_vars(v[..3].to_vec());
                let a = additive_attention(g, &b, &w, v[4], v[3])?;
                let p = g.constant(probe.clone())?;
                let s = g.mul(a, p)?;
                g.sum(s)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn masks_match_worked_examples() {
        let alpha = [0.8, 0.2];
        let m = ScmaMasks::from_weights(&alpha);
        assert_eq!(m.binary, vec![1.0, 0.0]);
        assert!((m.shift[0] - 0.2).abs() < 1e-15);
        assert_eq!(m.coefficients(&alpha), vec![1.0, 0.0]);

        let alpha = [0.3, 0.7];
        let m = ScmaMasks::from_weights(&alpha);
        assert_eq!(m.coefficients(&alpha)[0], 0.0);
    }

    #[test]
    fn tie_selects_lowest_index() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.5, 0.5]).unwrap()).unwrap();
        let mem = g.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let out = scma_select(&mut g, a, mem, ScmaMode::Hard).unwrap();
        assert_eq!(out.selected, 0);
        assert_eq!(g.value(out.copied).data(), &[1.0, 2.0]);
        assert_eq!(g.decisions(), &[0]);
    }

    #[test]
    fn scma_length_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.2, 0.3, 0.5]).unwrap()).unwrap();
        let mem = g.constant(mat(&[vec![1.0], vec![3.0]])).unwrap();
        assert!(matches!(
            scma_select(&mut g, a, mem, ScmaMode::Hard),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(soft_attend(&mut g, a, mem).is_err());
    }

    #[test]
    fn soft_mode_equals_soft_attend() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.25, 0.75]).unwrap()).unwrap();
        let mem = g.constant(mat(&[vec![0.0, 1.0], vec![4.0, -1.0]])).unwrap();
        let s = scma_select(&mut g, a, mem, ScmaMode::Soft).unwrap();
        let t = soft_attend(&mut g, a, mem).unwrap();
        assert_eq!(g.value(s.copied), g.value(t));
        assert_eq!(g.value(t).data(), &[3.0, -0.5]);
    }

    #[test]
    fn soft_attend_examples() {
        let mut g = Graph::new();
        let vals = g.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
        let c = soft_attend(&mut g, a, vals).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);

        let same = g.constant(mat(&[vec![0.3, -2.0], vec![0.3, -2.0], vec![0.3, -2.0]])).unwrap();
        let u = g.constant(Tensor::filled(&[3], 1.0 / 3.0)).unwrap();
        let c = soft_attend(&mut g, u, same).unwrap();
        for (x, y) in g.value(c).data().iter().zip([0.3, -2.0]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn gate_setup() -> (ParamSet, ContextGateWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ps = ParamSet::new();
        let w = ContextGateWeights::new(&mut ps, &mut rng, "cg", 2, 3, 3, 3);
        (ps, w)
    }

    fn gate_inputs(g: &mut Graph) -> (Var, Var, Var) {
        let w = g.constant(Tensor::vector(vec![0.5, -1.0]).unwrap()).unwrap();
        let h = g.constant(Tensor::vector(vec![0.1, 0.2, -0.3]).unwrap()).unwrap();
        let c = g.constant(Tensor::vector(vec![2.0, -0.5, 0.7]).unwrap()).unwrap();
        (w, h, c)
    }

    #[test]
    fn saturated_context_gate() {
        let (ps, w) = gate_setup();
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let (wt, ht, ct) = gate_inputs(&mut g);
        let src_only = context_gate(&mut g, &b, &w, wt, ht, ct, GateMode::Fixed(1.0)).unwrap();
        let tgt_only = context_gate(&mut g, &b, &w, wt, ht, ct, GateMode::Fixed(0.0)).unwrap();
        let src = g.matmul(b.get(w.w_src), ct).unwrap();
        let src = g.tanh(src).unwrap();
        let cat = g.concat(&[wt, ht]).unwrap();
        let tgt = g.matmul(b.get(w.w_tgt), cat).unwrap();
        let tgt = g.tanh(tgt).unwrap();
        assert_eq!(g.value(src_only.mixed), g.value(src));
        assert_eq!(g.value(tgt_only.mixed), g.value(tgt));
    }

    #[test]
    fn context_gate_bounded_and_checked() {
        let (ps, w) = gate_setup();
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let (wt, ht, ct) = gate_inputs(&mut g);
        let out = context_gate(&mut g, &b, &w, wt, ht, ct, GateMode::Learned).unwrap();
        assert!(g.value(out.mixed).data().iter().all(|v| v.abs() <= 1.0));
        assert!(context_gate(&mut g, &b, &w, ht, ht, ct, GateMode::Learned).is_err());

        let mut params = ps.tensors().to_vec();
        params.push(Tensor::vector(vec![0.5, -1.0]).unwrap());
        params.push(Tensor::vector(vec![0.1, 0.2, -0.3]).unwrap());
        params.push(Tensor::vector(vec![2.0, -0.5, 0.7]).unwrap());
        let report = finite_diff_check(
            |g: &mut Graph, v: &[Var]| {
                let b = Binding::from_vars(v[..3].to_vec());
                let out = context_gate(g, &b, &w, v[3], v[4], v[5], GateMode::Learned)?;
                let p = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap())?;
                let s = g.mul(out.mixed, p)?;
                g.sum(s)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn visual_attention_cases() {
        let (ps, w) = attn(6, 4, 3, 5);
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let q = g.constant(Tensor::vector(vec![0.3, 0.1, -0.2]).unwrap()).unwrap();
        let q2 = g.constant(Tensor::vector(vec![-0.9, 0.8, 0.5]).unwrap()).unwrap();
        let single = g.constant(mat(&[vec![1.0, 2.0, 3.0, 4.0]])).unwrap();
        let pk = project_keys(&mut g, &b, &w, single).unwrap();
        let (v, _) = visual_attend(&mut g, &b, &w, q, &pk).unwrap();
        assert_eq!(g.value(v).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = vec![0.5, -0.25, 0.125, 1.0];
        let same = g.constant(mat(&[row.clone(), row.clone(), row.clone()])).unwrap();
        let pk = project_keys(&mut g, &b, &w, same).unwrap();
        for query in [q, q2] {
            let (v, _) = visual_attend(&mut g, &b, &w, query, &pk).unwrap();
            for (x, y) in g.value(v).data().iter().zip(&row) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn visual_attention_gradient() {
        let (ps, w) = attn(7, 4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = ps.tensors().to_vec();
        params.push(uniform_matrix(&mut rng, 3, 4));
        params.push(uniform_vector(&mut rng, 3, 1.0));
        let probe = uniform_vector(&mut rng, 4, 1.0);
        let report = finite_diff_check(
            |g: &mut Graph, v: &[Var]| {
                let b = Binding::from_vars(v[..3].to_vec());
                let pk = project_keys(g, &b, &w, v[3])?;
                let (att, _) = visual_attend(g, &b, &w, v[4], &pk)?;
                let p = g.constant(probe.clone())?;
                let s = g.mul(att, p)?;
                g.sum(s)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
