//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use captionedit::attention::{scma_select, ScmaMode};
use captionedit::autodiff::{softmax, Graph, Tensor};
use captionedit::cells::{copy_lstm_step, lstm_step, CopyLstmWeights, GateMode, LstmState};
use captionedit::checkpoint::Checkpoint;
use captionedit::config::{Preset, RunConfig};
use captionedit::data::Example;
use captionedit::eval::{evaluate, EvalReport};
use captionedit::gradsuite::{run_suite, TOLERANCE};
use captionedit::metrics::{bleu, cider_d, corpus_bleu, rouge_l, IdfTable};
use captionedit::model::{sample_decode, DecodeSession};
use captionedit::objectives::scst_loss;
use captionedit::params::ParamSet;
use captionedit::train::{build_vocab, generate_splits, Trainer};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String), String>) -> Outcome {
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let o = Outcome { name, pass, detail };
    println!("{} {} {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    o
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn gradient_integrity() -> Result<(bool, String), String> {
    let start = Instant::now();
    let entries = run_suite(7).map_err(e)?;
    let elapsed = start.elapsed();
    let resolved = entries.iter().map(|x| x.report.max_resolved_rel_error).fold(0.0, f64::max);
    let strict = entries.iter().map(|x| x.report.max_rel_error).fold(0.0, f64::max);
    let noisy: usize = entries.iter().map(|x| x.report.noise_limited).sum();
    let checked: usize = entries.iter().map(|x| x.report.checked).sum();
    let failed: Vec<&str> = entries.iter().filter(|x| !x.passed()).map(|x| x.name.as_str()).collect();
    let ok = failed.is_empty() && resolved < TOLERANCE && elapsed < Duration::from_secs(30);
    Ok((
        ok,
        format!(
            "{} checks over {checked} coordinates, max rel error {resolved:.2e} above the rounding floor \
             (tol {TOLERANCE:.0e}); strict max {strict:.2e} with {noisy} noise-limited coordinates; \
             {:.1}s; failed {failed:?}",
            entries.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn scma_exactness() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let h = rng.random_range(1..=8);
        let alpha = softmax(&normal(&mut rng, n).iter().map(|v| v * 3.0).collect::<Vec<_>>());
        let mem = normal(&mut rng, n * h);
        let w = normal(&mut rng, h);
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(alpha.clone()).map_err(e)?).map_err(e)?;
        let m = g.leaf(Tensor::matrix(n, h, mem.clone()).map_err(e)?).map_err(e)?;
        let out = scma_select(&mut g, a, m, ScmaMode::Hard).map_err(e)?;
        let k = out.selected;
        let wv = g.constant(Tensor::vector(w.clone()).map_err(e)?).map_err(e)?;
        let prod = g.mul(out.copied, wv).map_err(e)?;
        let loss = g.sum(prod).map_err(e)?;
        g.backward(loss).map_err(e)?;

        let row = &mem[k * h..(k + 1) * h];
        let value_ok = g.value(out.copied).data().iter().zip(row).all(|(x, y)| x.to_bits() == y.to_bits());
        let argmax_ok = alpha.iter().all(|&v| v <= alpha[k]) && alpha[..k].iter().all(|&v| v < alpha[k]);
        let gm = g.grad(m).ok_or("no memory gradient")?.data().to_vec();
        let mem_grad_ok = (0..n).all(|i| {
            (0..h).all(|j| {
                let got = gm[i * h + j];
                if i == k { got == w[j] } else { got == 0.0 }
            })
        });
        let ga = g.grad(a).ok_or("no alpha gradient")?.data().to_vec();
        let alpha_grad_ok = (0..n).all(|i| i == k || ga[i] == 0.0);
        if !(value_ok && argmax_ok && mem_grad_ok && alpha_grad_ok) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("1000 instances, {bad} mismatches")))
}

fn copy_lstm_reduction() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (input, hidden) = (6, 9);
    let mut ps = ParamSet::new();
    let w = CopyLstmWeights::new(&mut ps, &mut rng, "cell", input, hidden);
    let mut g = Graph::new();
    let b = ps.bind_frozen(&mut g).map_err(e)?;
    let mut plain = LstmState::zeros(&mut g, hidden).map_err(e)?;
    let mut copy = plain;
    let mut diverged = None;
    for t in 0..100 {
        let x = g.constant(Tensor::vector(normal(&mut rng, input)).map_err(e)?).map_err(e)?;
        let cs = g.constant(Tensor::vector(normal(&mut rng, hidden)).map_err(e)?).map_err(e)?;
        plain = lstm_step(&mut g, &b, &w.lstm, x, &plain).map_err(e)?;
        copy = copy_lstm_step(&mut g, &b, &w, x, &copy, cs, GateMode::Fixed(0.0)).map_err(e)?.state;
        let same = |u, v| {
            let (p, q): (&Tensor, &Tensor) = (g.value(u), g.value(v));
            p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        };
        if diverged.is_none() && !(same(plain.h, copy.h) && same(plain.c, copy.c)) {
            diverged = Some(t);
        }
    }
    Ok((diverged.is_none(), format!("100 steps, first divergence {diverged:?}")))
}

fn overfit() -> Result<(bool, String), String> {
    let start = Instant::now();
    let cfg = RunConfig::preset(Preset::Overfit);
    let [train, dev, _] = generate_splits(&cfg);
    let vocab = build_vocab(&train, cfg.min_count);
    let mut t = Trainer::new(cfg.clone(), vocab, train, dev).map_err(e)?;
    let mut iter_to_target = None;
    let mut e_idx = 0;
    while t.history.len() < cfg.xe_epochs {
        let r = t.xe_epoch(e_idx, &mut std::io::sink()).map_err(e)?;
        e_idx += 1;
        if r.iterations == 0 {
            break;
        }
        let done: usize = t.history.iter().map(|h| h.iterations).sum::<usize>() + r.iterations;
        t.history.push(r.clone());
        if iter_to_target.is_none() && r.edit_token_xe < 0.1 {
            iter_to_target = Some(done);
        }
    }
    let iterations: usize = t.history.iter().map(|h| h.iterations).sum();
    let last_xe = t.history.last().map(|h| h.edit_token_xe).unwrap_or(f64::INFINITY);
    let decoded = t
        .editor()
        .decode_all(&t.train, &t.vocab, &t.params, cfg.max_decode_len)
        .map_err(e)?;
    let exact = t
        .train
        .iter()
        .zip(&decoded)
        .filter(|(x, d)| t.vocab.decode(&d.tokens) == x.truth)
        .count();
    let elapsed = start.elapsed();
    let ok = iterations <= 300 && last_xe < 0.1 && exact >= 15 && elapsed < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "{iterations} iterations, token XE {last_xe:.4} (first < 0.1 after {iter_to_target:?}), \
             {exact}/{} reproduced, {:.1}s",
            t.train.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

struct DeskRun {
    test_report: EvalReport,
    mse: (f64, f64, f64, f64),
    scst: Option<(f64, f64)>,
}

/// XE on the desk corpus, then one MSE epoch; optionally SCST from the XE
/// weights.
fn desk_run(
    cfg: &RunConfig,
    splits: &[Vec<Example>; 3],
    scst: bool,
) -> captionedit::Result<DeskRun> {
    let [train, dev, test] = splits.clone();
    let vocab = build_vocab(&train, cfg.min_count);
    let mut t = Trainer::new(cfg.clone(), vocab, train, dev)?;
    let sink = &mut std::io::sink();
    for i in 0..cfg.xe_epochs {
        t.xe_epoch(i, sink)?;
    }
    let xe_dev = t.dev_scores()?;
    let xe_models = (t.editnet.clone(), t.dcnet.clone());
    t.mse_epoch(cfg.xe_epochs, sink)?;
    let mse_dev = t.dev_scores()?;
    let test_report = t.evaluate(&test)?;
    let scst = if scst {
        let mut s = Trainer::with_models(
            cfg.clone(),
            t.vocab.clone(),
            xe_models.0,
            xe_models.1,
            t.train.clone(),
            t.dev.clone(),
        )?;
        s.scst_phase(5, None, sink)?;
        Some((xe_dev.cider_d, s.dev_scores()?.cider_d))
    } else {
        None
    };
    Ok(DeskRun {
        test_report,
        mse: (xe_dev.dc_mse, mse_dev.dc_mse, xe_dev.cider_d, mse_dev.cider_d),
        scst,
    })
}

fn scst_tied_rewards() -> Result<(bool, String), String> {
    let cfg = RunConfig::preset(Preset::Desk);
    let mut small = cfg.clone();
    small.train_size = 8;
    let [train, _, _] = generate_splits(&small);
    let vocab = build_vocab(&train, 1);
    let t = Trainer::new(cfg.clone(), vocab, train, Vec::new()).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let eb = t.editnet.params.bind(&mut g).map_err(e)?;
    let db = t.dcnet.params.bind_frozen(&mut g).map_err(e)?;
    let mut terms = Vec::new();
    for x in &t.train {
        let ids = t.vocab.encode(&x.existing);
        let feats = x.features(&t.params);
        let mut s = DecodeSession::new(&mut g, Some((&t.editnet, &eb)), Some((&t.dcnet, &db)), &ids, &feats)
            .map_err(e)?;
        let (_, lps) = sample_decode(&mut g, &mut s, cfg.max_decode_len, &mut rng).map_err(e)?;
        let mut lp = lps[0];
        for &v in &lps[1..] {
            lp = g.add(lp, v).map_err(e)?;
        }
        terms.push(scst_loss(&mut g, lp, 0.731, 0.731).map_err(e)?);
    }
    let mut loss = terms[0];
    for &v in &terms[1..] {
        loss = g.add(loss, v).map_err(e)?;
    }
    g.backward(loss).map_err(e)?;
    let grads = t.editnet.params.gradients(&g, &eb);
    let nonzero: usize = grads.iter().map(|gr| gr.data().iter().filter(|v| **v != 0.0).count()).sum();
    let total: usize = grads.iter().map(Tensor::numel).sum();
    Ok((nonzero == 0, format!("{nonzero} non-zero of {total} gradient entries")))
}

#[derive(Deserialize)]
struct Image {
    candidate: String,
    references: Vec<String>,
}

#[derive(Deserialize)]
struct PerImage {
    bleu: [f64; 4],
    rouge_l: f64,
    cider_d: f64,
}

#[derive(Deserialize)]
struct Fixture {
    images: Vec<Image>,
    per_image: Vec<PerImage>,
    corpus_bleu: [f64; 4],
    cider_d_mean: f64,
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn metric_oracles() -> Result<(bool, String), String> {
    let fixtures: Vec<Fixture> = serde_json::from_str(include_str!("fixtures/metrics.json")).map_err(e)?;
    let mut worst: f64 = 0.0;
    for f in &fixtures {
        let cands: Vec<Vec<String>> = f.images.iter().map(|i| toks(&i.candidate)).collect();
        let refs: Vec<Vec<Vec<String>>> = f
            .images
            .iter()
            .map(|i| i.references.iter().map(|r| toks(r)).collect())
            .collect();
        let idf = IdfTable::build(&refs).map_err(e)?;
        let cider = cider_d(&cands, &refs, &idf).map_err(e)?;
        for (i, exp) in f.per_image.iter().enumerate() {
            let b = bleu(&cands[i], &refs[i]).map_err(e)?;
            for n in 0..4 {
                worst = worst.max((b[n] - exp.bleu[n]).abs());
            }
            worst = worst.max((rouge_l(&cands[i], &refs[i]).map_err(e)? - exp.rouge_l).abs());
            worst = worst.max((cider.per_image[i] - exp.cider_d).abs());
        }
        let cb = corpus_bleu(&cands, &refs).map_err(e)?;
        for n in 0..4 {
            worst = worst.max((cb[n] - f.corpus_bleu[n]).abs());
        }
        worst = worst.max((cider.mean - f.cider_d_mean).abs());
    }
    Ok((
        fixtures.len() == 5 && worst <= 1e-6,
        format!("{} fixtures, max abs deviation {worst:.2e}", fixtures.len()),
    ))
}

fn small_pipeline(dir: &std::path::Path) -> captionedit::Result<(EvalReport, Vec<u8>)> {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.seed = 21;
    cfg.train_size = 96;
    cfg.dev_size = 24;
    cfg.test_size = 24;
    cfg.xe_epochs = 2;
    cfg.mse_epochs = 1;
    cfg.scst_epochs = 1;
    let [train, dev, test] = generate_splits(&cfg);
    let vocab = build_vocab(&train, cfg.min_count);
    let mut t = Trainer::new(cfg.clone(), vocab, train, dev)?;
    t.run(Some(dir), &mut std::io::sink())?;
    let ck = Checkpoint::load(&dir.join("model.ckpt"))?;
    let (en, dn) = ck.models()?;
    let ed = captionedit::eval::Editor::new(&en, &dn);
    let (report, _) = evaluate(&ed, &test, &ck.vocab, &t.params, cfg.max_decode_len)?;
    Ok((report, ck.to_bytes()?))
}

fn persistence() -> Result<(bool, String), String> {
    let a = tempfile::tempdir().map_err(e)?;
    let b = tempfile::tempdir().map_err(e)?;
    let (ra, bytes_a) = small_pipeline(a.path()).map_err(e)?;
    let (rb, bytes_b) = small_pipeline(b.path()).map_err(e)?;
    let ck = Checkpoint::read_from(&mut bytes_a.as_slice()).map_err(e)?;
    let round = ck.to_bytes().map_err(e)? == bytes_a;
    let params_exact = ck
        .editnet
        .iter()
        .chain(&ck.dcnet)
        .zip({
            let (en, dn) = ck.models().map_err(e)?;
            let v: Vec<Tensor> = en.params.tensors().iter().chain(dn.params.tensors()).cloned().collect();
            v
        })
        .all(|((_, t), u)| t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let same_run = bytes_a == bytes_b;
    let same_report = serde_json::to_string(&ra).map_err(e)? == serde_json::to_string(&rb).map_err(e)?;
    Ok((
        round && params_exact && same_run && same_report,
        format!(
            "round trip {round}, parameters bit-exact {params_exact}, \
             checkpoints identical across runs {same_run}, reports identical {same_report}"
        ),
    ))
}

fn main() {
    let mut results = vec![
        check("gradient-integrity", gradient_integrity),
        check("scma-exactness", scma_exactness),
        check("copy-lstm-reduction", copy_lstm_reduction),
        check("metric-oracles", metric_oracles),
        check("persistence-determinism", persistence),
        check("scst-tied-rewards", scst_tied_rewards),
        check("overfit", overfit),
    ];

    let cfg = RunConfig::preset(Preset::Desk);
    let splits = generate_splits(&cfg);
    let start = Instant::now();
    let hard = desk_run(&cfg, &splits, true);
    let mut soft_cfg = cfg.clone();
    soft_cfg.hard_scma = false;
    let soft = desk_run(&soft_cfg, &splits, false);
    let elapsed = start.elapsed();

    results.push(check("editing-improvement", || {
        let hard = hard.as_ref().map_err(e)?;
        let soft = soft.as_ref().map_err(e)?;
        let r = &hard.test_report;
        let s = &soft.test_report;
        let ok = r.model.cider_d > r.identity.cider_d
            && r.model.bleu[3] > r.identity.bleu[3]
            && elapsed < Duration::from_secs(15 * 60);
        Ok((
            ok,
            format!(
                "test CIDEr-D {:.4} vs identity {:.4}, BLEU-4 {:.4} vs {:.4}; \
                 soft-SCMA CIDEr-D {:.4} BLEU-4 {:.4}; {:.0}s",
                r.model.cider_d,
                r.identity.cider_d,
                r.model.bleu[3],
                r.identity.bleu[3],
                s.model.cider_d,
                s.model.bleu[3],
                elapsed.as_secs_f64()
            ),
        ))
    }));
    results.push(check("mse-finetuning", || {
        let (before, after, c0, c1) = hard.as_ref().map_err(e)?.mse;
        let ok = after < before && c1 >= 0.98 * c0;
        Ok((
            ok,
            format!("dev MSE {before:.6} -> {after:.6}, dev CIDEr-D {c0:.4} -> {c1:.4}"),
        ))
    }));
    results.push(check("scst-stability", || {
        let (c0, c1) = hard.as_ref().map_err(e)?.scst.ok_or("no scst run")?;
        Ok((c1 >= 0.98 * c0, format!("dev CIDEr-D {c0:.4} -> {c1:.4} after 5 epochs")))
    }));

    let failed = results.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
