//! Training phases: cross-entropy, hidden-state MSE fine-tuning, and
//! self-critical sequence training.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_corpus_from, make_batches, Batch, CorpusParams, Example, Vocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Editor, EvalReport};
use crate::metrics::{cider_d_single, IdfTable};
use crate::model::{sample_decode, source_ids, teacher_forced, DcNet, DecodeSession, EditNet};
use crate::objectives::{combined_loss, hidden_mse_loss, scst_loss, xe_loss};
use crate::optim::{Adam, ScstLrController};
use crate::params::Binding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Xe,
    Mse,
    Scst,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Xe => "xe",
            Stage::Mse => "mse",
            Stage::Scst => "scst",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub iterations: usize,
    /// Mean per-batch loss.
    pub loss: f64,
    /// EditNet cross-entropy per target token (0 when EditNet was not trained).
    pub edit_token_xe: f64,
    pub lr: f64,
    pub ss_prob: f64,
    pub dev: Option<DevScores>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DevScores {
    pub cider_d: f64,
    pub bleu4: f64,
    /// DCNet hidden-state MSE against the encoded ground truth.
    pub dc_mse: f64,
}

struct BatchLoss {
    loss: f64,
    edit_xe: f64,
    edit_tokens: usize,
}

fn sum_all(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars.split_first().ok_or(Error::Empty("loss terms"))?;
    rest.iter().try_fold(first, |acc, &v| g.add(acc, v))
}

/// DCNet encoding of the truth caption, treated as a constant target.
fn hidden_target(g: &mut Graph, dcnet: &DcNet, b: &Binding, framed_truth: &[usize]) -> Result<Var> {
    let words = &framed_truth[1..framed_truth.len() - 1];
    let (_, code) = dcnet.encode(g, b, &source_ids(words))?;
    g.stop_gradient(code)
}

/// Train, dev and test corpora for `cfg`, with disjoint image ids.
pub fn generate_splits(cfg: &RunConfig) -> [Vec<Example>; 3] {
    let params = cfg.corpus_params();
    let sizes = [cfg.train_size, cfg.dev_size, cfg.test_size];
    let mut first = 0u64;
    let mut out: [Vec<Example>; 3] = Default::default();
    for (i, size) in sizes.into_iter().enumerate() {
        out[i] = generate_corpus_from(cfg.seed.wrapping_add(i as u64), size, first, &params);
        first += size as u64;
    }
    out
}

/// Vocabulary over the truth and existing captions of `train`.
pub fn build_vocab(train: &[Example], min_count: usize) -> Vocab {
    Vocab::build(train.iter().map(|e| &e.truth).chain(train.iter().map(|e| &e.existing)), min_count)
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub params: CorpusParams,
    pub editnet: EditNet,
    pub dcnet: DcNet,
    pub edit_adam: Adam,
    pub dc_adam: Adam,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub history: Vec<EpochRecord>,
    reward_idf: IdfTable,
    rng: ChaCha8Rng,
    iteration: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig, vocab: Vocab, train: Vec<Example>, dev: Vec<Example>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let model_cfg = cfg.model_config(vocab.len());
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let editnet = EditNet::new(&model_cfg, &mut init)?;
        let dcnet = DcNet::new(&model_cfg, &mut init)?;
        Trainer::with_models(cfg, vocab, editnet, dcnet, train, dev)
    }

    pub fn with_models(
        cfg: RunConfig,
        vocab: Vocab,
        editnet: EditNet,
        dcnet: DcNet,
        train: Vec<Example>,
        dev: Vec<Example>,
    ) -> Result<Self> {
        let refs: Vec<Vec<Vec<String>>> = train.iter().map(|e| e.references.clone()).collect();
        Ok(Trainer {
            params: cfg.corpus_params(),
            edit_adam: Adam::new(&editnet.params, cfg.lr),
            dc_adam: Adam::new(&dcnet.params, cfg.lr),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e),
            reward_idf: IdfTable::build(&refs)?,
            cfg,
            vocab,
            editnet,
            dcnet,
            train,
            dev,
            history: Vec::new(),
            iteration: 0,
            epoch: 0,
        })
    }

    pub fn editor(&self) -> Editor<'_> {
        Editor::new(&self.editnet, &self.dcnet)
    }

    pub fn checkpoint(&self, stage: Stage) -> Checkpoint {
        let mut ck = Checkpoint::from_models(&self.vocab, &self.editnet, &self.dcnet);
        ck.epoch = self.epoch as u64;
        ck.stage = stage.name().into();
        ck.editnet_adam = Some(self.edit_adam.state.clone());
        ck.dcnet_adam = Some(self.dc_adam.state.clone());
        ck
    }

    fn batches(&mut self) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        make_batches(&self.train, &order, self.cfg.batch_size, &self.vocab, &self.params)
    }

    /// One teacher-forced step on a batch. `mse` adds the hidden-state term
    /// to DCNet (and to EditNet when configured).
    fn supervised_step(&mut self, batch: &Batch, ss: f64, mse: bool, train_edit: bool) -> Result<BatchLoss> {
        let train_dc = self.cfg.train_dcnet;
        let mut g = Graph::new();
        let eb = self.editnet.params.bind(&mut g)?;
        let db = if train_dc {
            self.dcnet.params.bind(&mut g)?
        } else {
            self.dcnet.params.bind_frozen(&mut g)?
        };
        let mut terms = Vec::with_capacity(2 * batch.len());
        let mut edit_xe = Vec::with_capacity(batch.len());
        let mut edit_tokens = 0;
        for i in 0..batch.len() {
            let existing = batch.existing_ids(i);
            let truth = batch.truth_ids(i);
            let feats = &batch.features[i];
            let target = if mse { Some(hidden_target(&mut g, &self.dcnet, &db, truth)?) } else { None };
            if train_edit {
                let mut s = DecodeSession::new(&mut g, Some((&self.editnet, &eb)), None, existing, feats)?;
                let tf = teacher_forced(&mut g, &mut s, truth, ss, &mut self.rng)?;
                let logits: Vec<Var> = tf.steps.iter().filter_map(|o| o.edit_logits).collect();
                let xe = xe_loss(&mut g, &logits, &tf.targets)?;
                edit_xe.push(xe);
                edit_tokens += tf.targets.len();
                let mut l = xe;
                if let (Some(t), true, Some(h)) = (target, self.cfg.mse_on_editnet, tf.last_edit_hidden) {
                    let p = self.editnet.project_hidden(&mut g, &eb, h)?;
                    let m = hidden_mse_loss(&mut g, p, t)?;
                    l = combined_loss(&mut g, xe, m)?;
                }
                terms.push(l);
            }
            if train_dc {
                let mut s = DecodeSession::new(&mut g, None, Some((&self.dcnet, &db)), existing, feats)?;
                let tf = teacher_forced(&mut g, &mut s, truth, ss, &mut self.rng)?;
                let logits: Vec<Var> = tf.steps.iter().filter_map(|o| o.dc_logits).collect();
                let mut l = xe_loss(&mut g, &logits, &tf.targets)?;
                if let (Some(t), Some(h)) = (target, tf.last_dc_hidden) {
                    let p = self.dcnet.project_hidden(&mut g, &db, h)?;
                    let m = hidden_mse_loss(&mut g, p, t)?;
                    l = combined_loss(&mut g, l, m)?;
                }
                terms.push(l);
            }
        }
        let total = sum_all(&mut g, &terms)?;
        let loss = g.affine(total, 1.0 / batch.len() as f64, 0.0)?;
        g.backward(loss)?;
        if train_edit {
            let grads = self.editnet.params.gradients(&g, &eb);
            self.edit_adam.step(&mut self.editnet.params, &grads)?;
        }
        if train_dc {
            let grads = self.dcnet.params.gradients(&g, &db);
            self.dc_adam.step(&mut self.dcnet.params, &grads)?;
        }
        Ok(BatchLoss {
            loss: g.value(loss).item(),
            edit_xe: edit_xe.iter().map(|&v| g.value(v).item()).sum(),
            edit_tokens,
        })
    }

    fn scst_step(&mut self, batch: &Batch) -> Result<BatchLoss> {
        let editor_dc = self.editnet.config.fuse_dcnet.then_some(&self.dcnet);
        let mut baseline = Vec::with_capacity(batch.len());
        {
            let editor = Editor {
                editnet: &self.editnet,
                dcnet: editor_dc,
            };
            for i in 0..batch.len() {
                let d = editor.decode_one(batch.existing_ids(i), &batch.features[i], self.cfg.max_decode_len)?;
                baseline.push(d.tokens);
            }
        }
        let mut g = Graph::new();
        let eb = self.editnet.params.bind(&mut g)?;
        let db = match editor_dc {
            Some(d) => Some(d.params.bind_frozen(&mut g)?),
            None => None,
        };
        let mut terms = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let refs = &self.train[batch.indices[i]].references;
            let mut s = DecodeSession::new(
                &mut g,
                Some((&self.editnet, &eb)),
                editor_dc.zip(db.as_ref()),
                batch.existing_ids(i),
                &batch.features[i],
            )?;
            let (tokens, logps) = sample_decode(&mut g, &mut s, self.cfg.max_decode_len, &mut self.rng)?;
            let r = cider_d_single(&self.vocab.decode(&tokens), refs, &self.reward_idf)?;
            let b = cider_d_single(&self.vocab.decode(&baseline[i]), refs, &self.reward_idf)?;
            let lp = sum_all(&mut g, &logps)?;
            terms.push(scst_loss(&mut g, lp, r, b)?);
        }
        let total = sum_all(&mut g, &terms)?;
        let loss = g.affine(total, 1.0 / batch.len() as f64, 0.0)?;
        g.backward(loss)?;
        let grads = self.editnet.params.gradients(&g, &eb);
        self.edit_adam.step(&mut self.editnet.params, &grads)?;
        Ok(BatchLoss {
            loss: g.value(loss).item(),
            edit_xe: 0.0,
            edit_tokens: 0,
        })
    }

    fn run_epoch(&mut self, stage: Stage, lr: f64, ss: f64, log: &mut dyn Write) -> Result<EpochRecord> {
        self.edit_adam.lr = lr;
        self.dc_adam.lr = lr;
        let cap = self.cfg.max_iterations;
        let mut losses = Vec::new();
        let (mut xe, mut tokens) = (0.0, 0);
        for batch in self.batches() {
            if stage == Stage::Xe && cap > 0 && self.iteration >= cap {
                break;
            }
            let b = match stage {
                Stage::Xe => self.supervised_step(&batch, ss, false, true)?,
                Stage::Mse => self.supervised_step(&batch, ss, true, self.cfg.mse_on_editnet)?,
                Stage::Scst => self.scst_step(&batch)?,
            };
            if !b.loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            writeln!(log, "{} {} {:.6} {:.3e} {:.2}", self.epoch, self.iteration, b.loss, lr, ss)?;
            self.iteration += 1;
            losses.push(b.loss);
            xe += b.edit_xe;
            tokens += b.edit_tokens;
        }
        let record = EpochRecord {
            stage,
            epoch: self.epoch,
            iterations: losses.len(),
            loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            edit_token_xe: if tokens > 0 { xe / tokens as f64 } else { 0.0 },
            lr,
            ss_prob: ss,
            dev: None,
        };
        self.epoch += 1;
        Ok(record)
    }

    pub fn xe_epoch(&mut self, index: usize, log: &mut dyn Write) -> Result<EpochRecord> {
        let (lr, ss) = self.cfg.schedule().at(index);
        self.run_epoch(Stage::Xe, lr, ss, log)
    }

    /// XE plus hidden-state MSE, continuing the XE schedule at `index`.
    pub fn mse_epoch(&mut self, index: usize, log: &mut dyn Write) -> Result<EpochRecord> {
        let (lr, ss) = self.cfg.schedule().at(index);
        self.run_epoch(Stage::Mse, lr, ss, log)
    }

    pub fn scst_epoch(&mut self, lr: f64, log: &mut dyn Write) -> Result<EpochRecord> {
        self.run_epoch(Stage::Scst, lr, 0.0, log)
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<EvalReport> {
        let (r, _) = evaluate(&self.editor(), examples, &self.vocab, &self.params, self.cfg.max_decode_len)?;
        Ok(r)
    }

    /// Mean DCNet hidden-state MSE over `examples` under teacher forcing.
    pub fn dc_mse(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("mse corpus"));
        }
        let order: Vec<usize> = (0..examples.len()).collect();
        let mut total = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for batch in make_batches(examples, &order, 32, &self.vocab, &self.params) {
            let mut g = Graph::new();
            let db = self.dcnet.params.bind_frozen(&mut g)?;
            for i in 0..batch.len() {
                let truth = batch.truth_ids(i);
                let t = hidden_target(&mut g, &self.dcnet, &db, truth)?;
                let mut s = DecodeSession::new(&mut g, None, Some((&self.dcnet, &db)), batch.existing_ids(i), &batch.features[i])?;
                let tf = teacher_forced(&mut g, &mut s, truth, 0.0, &mut rng)?;
                let h = tf.last_dc_hidden.ok_or(Error::Empty("dcnet hidden"))?;
                let p = self.dcnet.project_hidden(&mut g, &db, h)?;
                let m = hidden_mse_loss(&mut g, p, t)?;
                total += g.value(m).item();
            }
        }
        Ok(total / examples.len() as f64)
    }

    pub fn dev_scores(&self) -> Result<DevScores> {
        let r = self.evaluate(&self.dev)?;
        Ok(DevScores {
            cider_d: r.model.cider_d,
            bleu4: r.model.bleu[3],
            dc_mse: self.dc_mse(&self.dev)?,
        })
    }

    fn finish_epoch(
        &mut self,
        mut record: EpochRecord,
        with_dev: bool,
        out_dir: Option<&Path>,
        log: &mut dyn Write,
    ) -> Result<EpochRecord> {
        if with_dev && !self.dev.is_empty() {
            let d = self.dev_scores()?;
            writeln!(
                log,
                "dev epoch {} stage {} CIDEr-D {:.4} BLEU-4 {:.4} dc_mse {:.6}",
                record.epoch,
                record.stage.name(),
                d.cider_d,
                d.bleu4,
                d.dc_mse
            )?;
            record.dev = Some(d);
        }
        if let Some(dir) = out_dir {
            self.checkpoint(record.stage).save(&dir.join("model.ckpt"))?;
        }
        self.history.push(record.clone());
        Ok(record)
    }

    /// All configured phases in order, checkpointing after every epoch.
    pub fn run(&mut self, out_dir: Option<&Path>, log: &mut dyn Write) -> Result<()> {
        let every = self.cfg.eval_every;
        for e in 0..self.cfg.xe_epochs {
            if self.cfg.max_iterations > 0 && self.iteration >= self.cfg.max_iterations {
                break;
            }
            let r = self.xe_epoch(e, log)?;
            let last = e + 1 == self.cfg.xe_epochs;
            self.finish_epoch(r, every > 0 && ((e + 1) % every == 0 || last), out_dir, log)?;
        }
        for e in 0..self.cfg.mse_epochs {
            let r = self.mse_epoch(self.cfg.xe_epochs + e, log)?;
            self.finish_epoch(r, true, out_dir, log)?;
        }
        self.scst_phase(self.cfg.scst_epochs, out_dir, log)
    }

    /// `epochs` SCST epochs. The rate is annealed whenever dev CIDEr-D fails
    /// to beat the best score so far, starting from the pre-SCST model.
    pub fn scst_phase(&mut self, epochs: usize, out_dir: Option<&Path>, log: &mut dyn Write) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let mut ctl = ScstLrController::new(&self.cfg.schedule());
        if !self.dev.is_empty() {
            ctl.observe(self.evaluate(&self.dev)?.model.cider_d);
        }
        for _ in 0..epochs {
            let r = self.scst_epoch(ctl.lr, log)?;
            let r = self.finish_epoch(r, true, out_dir, log)?;
            if let Some(d) = &r.dev {
                ctl.observe(d.cider_d);
            }
        }
        Ok(())
    }
}
