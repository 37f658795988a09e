//! Decoder-only autoregressive report language model with perplexity
//! tracking, plus the pooled report embedding used by the contrastive
//! stage.
//!
//! The output head starts at exactly zero, so an untrained model
//! assigns the uniform distribution to every position and its
//! perplexity equals the vocabulary size — a closed-form anchor the
//! tests assert.

use std::path::Path;

use ndarray::Array1;
use rand::Rng as _;

use crate::ckpt;
use crate::error::{Error, Result};
use crate::log::{write_csv, JsonlLog};
use crate::nn::layers::{LayerNorm, Linear, TransformerBlock, WeightInit};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::params::{init, ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::rng;
use crate::text::vocab::Vocabulary;

/// Architecture of the report language model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Maximum sequence length; longer reports are truncated.
    pub context: usize,
    /// Dimension of the pooled report embedding.
    pub embed_dim: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            width: 64,
            depth: 2,
            heads: 4,
            context: 64,
            embed_dim: 128,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("language model needs a vocabulary size"));
        }
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.embed_dim == 0 {
            return Err(Error::config("language model dims must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config("width must divide evenly into heads"));
        }
        if self.context < 2 {
            return Err(Error::config("context must be at least 2"));
        }
        Ok(())
    }
}

/// GPT-style decoder: token + learned position embeddings, causal
/// transformer blocks, final layer norm, zero-initialized logit head,
/// and a linear pooling head for report embeddings.
#[derive(Debug, Clone)]
pub struct ReportLM {
    pub cfg: LmConfig,
    emb: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
    pool: Linear,
}

impl ReportLM {
    pub fn new(store: &mut ParamStore, r: &mut rng::Rng, cfg: LmConfig) -> Result<Self> {
        cfg.validate()?;
        let emb = store.add("lm.emb", init::normal(r, &[cfg.vocab_size, cfg.width], 0.02));
        let pos = store.add("lm.pos", init::normal(r, &[cfg.context, cfg.width], 0.01));
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, r, &format!("lm.blk{i}"), cfg.width, cfg.heads, true))
            .collect();
        let ln_f = LayerNorm::new(store, "lm.lnf", cfg.width);
        let head = Linear::with_init(
            store,
            r,
            "lm.head",
            cfg.width,
            cfg.vocab_size,
            true,
            WeightInit::Zeros,
        );
        let pool = Linear::new(store, r, "lm.pool", cfg.width, cfg.embed_dim, true);
        Ok(Self {
            cfg,
            emb,
            pos,
            blocks,
            ln_f,
            head,
            pool,
        })
    }

    /// Frame a report with bos/eos and truncate to the context length.
    pub fn prepare_ids(&self, vocab: &Vocabulary, text: &str) -> Vec<usize> {
        let mut ids = vocab.encode_framed(text);
        ids.truncate(self.cfg.context);
        ids
    }

    /// Final hidden states (T, width) after the causal stack.
    fn hidden_on_tape(&self, t: &Tape, ids: &[usize]) -> Var {
        assert!(!ids.is_empty() && ids.len() <= self.cfg.context);
        let mut h = t.gather_rows(t.param(self.emb), ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        h = t.add(h, t.gather_rows(t.param(self.pos), &positions));
        for blk in &self.blocks {
            h = blk.forward(t, h);
        }
        self.ln_f.forward(t, h)
    }

    /// Next-token logits (T, vocab) for an id sequence.
    pub fn logits_on_tape(&self, t: &Tape, ids: &[usize]) -> Var {
        let h = self.hidden_on_tape(t, ids);
        self.head.forward(t, h)
    }

    /// Mean next-token cross-entropy of one framed report, with the
    /// number of predicted positions. Needs at least 2 ids.
    pub fn nll_on_tape(&self, t: &Tape, ids: &[usize]) -> (Var, usize) {
        assert!(ids.len() >= 2, "framed reports always hold bos and eos");
        let inputs = &ids[..ids.len() - 1];
        let targets = &ids[1..];
        let logits = self.logits_on_tape(t, inputs);
        (t.cross_entropy_rows(logits, targets), targets.len())
    }

    /// Unit-norm pooled embedding: last-token hidden state, projected.
    pub fn encode_ids_on_tape(&self, t: &Tape, ids: &[usize]) -> Var {
        let h = self.hidden_on_tape(t, ids);
        let last = t.reshape(t.row(h, ids.len() - 1), &[1, self.cfg.width]);
        let out = self.pool.forward(t, last);
        let unit = t.l2_normalize_rows(out, 1e-12);
        t.reshape(unit, &[self.cfg.embed_dim])
    }

    /// Eval-mode report embedding. Empty reports embed bos+eos alone;
    /// over-long reports equal the embedding of their truncated prefix.
    pub fn encode_report(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        text: &str,
    ) -> Array1<f64> {
        let ids = self.prepare_ids(vocab, text);
        let t = Tape::new(store);
        let v = self.encode_ids_on_tape(&t, &ids);
        t.value_owned(v)
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-d embedding")
    }

    /// exp(token-level mean negative log likelihood) over framed,
    /// truncated reports.
    pub fn perplexity(&self, store: &ParamStore, reports: &[Vec<usize>]) -> Result<f64> {
        if reports.is_empty() {
            return Err(Error::degenerate("perplexity needs at least one report"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for ids in reports {
            let mut ids = ids.clone();
            ids.truncate(self.cfg.context);
            let t = Tape::new(store);
            let (nll, n) = self.nll_on_tape(&t, &ids);
            total += t.scalar(nll) * n as f64;
            count += n;
        }
        Ok((total / count as f64).exp())
    }
}

/// Language-model training hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub lm: LmConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// Fraction of the corpus held out for validation perplexity.
    pub val_fraction: f64,
    /// Fraction of the training pool actually used (data ablation).
    pub data_fraction: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            steps: 400,
            batch_size: 8,
            lr: 1e-3,
            eval_every: 50,
            val_fraction: 0.15,
            data_fraction: 1.0,
        }
    }
}

impl LmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("steps, batch_size, eval_every must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(Error::config("val_fraction must be in (0,1)"));
        }
        if !(0.0..=1.0).contains(&self.data_fraction) || self.data_fraction == 0.0 {
            return Err(Error::config("data_fraction must be in (0,1]"));
        }
        Ok(())
    }
}

/// One logged evaluation point.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PplPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_ppl: f64,
}

/// Trained model plus its owning store and validation curve.
pub struct LmRunOutput {
    pub store: ParamStore,
    pub lm: ReportLM,
    pub curve: Vec<PplPoint>,
    pub final_val_ppl: f64,
    /// Corpus indices used for training after the data-fraction cut.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Shuffle the corpus once (seeded), carve the tail off as validation,
/// then keep a nested prefix of the rest according to `fraction`:
/// smaller fractions are strict subsets of larger ones under one seed.
pub fn split_corpus(
    n: usize,
    val_fraction: f64,
    data_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, "lm-split", 0);
    use rand::seq::SliceRandom;
    order.shuffle(&mut r);
    let n_val = ((n as f64 * val_fraction).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = order.split_off(n - n_val);
    let keep = ((order.len() as f64 * data_fraction).ceil() as usize).max(1);
    order.truncate(keep);
    (order, val)
}

/// Next-word pretraining over framed report token sequences.
pub fn pretrain_report_lm(
    reports: &[Vec<usize>],
    cfg: &LmTrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<LmRunOutput> {
    cfg.validate()?;
    if reports.len() < 2 {
        return Err(Error::degenerate(
            "language model pretraining needs at least two reports",
        ));
    }
    for (i, ids) in reports.iter().enumerate() {
        if ids.len() < 2 {
            return Err(Error::degenerate(format!(
                "report {i} has fewer than 2 tokens; frame reports with bos/eos"
            )));
        }
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            JsonlLog::to_file(&dir.join("train_log.jsonl"))?
        }
        None => JsonlLog::in_memory(),
    };
    let (train_idx, val_idx) = split_corpus(reports.len(), cfg.val_fraction, cfg.data_fraction, seed);
    let val_set: Vec<Vec<usize>> = val_idx.iter().map(|&i| reports[i].clone()).collect();

    let mut store = ParamStore::new();
    let mut init_rng = rng::stream(seed, "lm-init", 0);
    let lm = ReportLM::new(&mut store, &mut init_rng, cfg.lm.clone())?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        store.len(),
    );

    let mut curve = Vec::new();
    let mut final_val_ppl = f64::NAN;
    for step in 1..=cfg.steps {
        let mut r = rng::stream(seed, "lm-step", step as u64);
        let batch: Vec<&Vec<usize>> = (0..cfg.batch_size)
            .map(|_| &reports[train_idx[r.random_range(0..train_idx.len())]])
            .collect();
        let (loss_val, grads) = {
            let t = Tape::new(&store);
            let mut parts = Vec::with_capacity(batch.len());
            let mut total_positions = 0usize;
            for ids in &batch {
                let mut ids = (*ids).clone();
                ids.truncate(cfg.lm.context);
                let (nll, n) = lm.nll_on_tape(&t, &ids);
                parts.push(t.scale(nll, n as f64));
                total_positions += n;
            }
            let summed = t.add_n(&parts);
            let loss = t.scale(summed, 1.0 / total_positions as f64);
            let v = t.scalar(loss);
            if !v.is_finite() {
                return Err(Error::training(format!(
                    "non-finite language model loss at step {step}"
                )));
            }
            (v, t.backward(loss))
        };
        adam.step(&mut store, &grads);

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let ppl = lm.perplexity(&store, &val_set)?;
            final_val_ppl = ppl;
            curve.push(PplPoint {
                step,
                train_loss: loss_val,
                val_ppl: ppl,
            });
            log.log(serde_json::json!({
                "event": "eval",
                "step": step,
                "train_loss": loss_val,
                "val_ppl": ppl,
            }))?;
        }
    }

    if let Some(dir) = out_dir {
        let rows: Vec<Vec<f64>> = curve
            .iter()
            .map(|p| vec![p.step as f64, p.train_loss, p.val_ppl])
            .collect();
        write_csv(&dir.join("ppl_curve.csv"), &["step", "train_loss", "val_ppl"], &rows)?;
        ckpt::save(
            dir,
            "lm",
            seed,
            cfg.steps,
            serde_json::to_value(cfg)?,
            serde_json::json!({ "final_val_ppl": final_val_ppl }),
            &store,
        )?;
        log.flush()?;
    }
    Ok(LmRunOutput {
        store,
        lm,
        curve,
        final_val_ppl,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

/// Load a language model checkpoint saved by [`pretrain_report_lm`].
pub fn load_lm(dir: &Path) -> Result<(ReportLM, ParamStore, LmTrainConfig, u64)> {
    let manifest = ckpt::read_manifest(dir, "lm")?;
    let cfg: LmTrainConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::checkpoint(format!("bad language model config: {e}")))?;
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut r = rng::stream(manifest.seed, "lm-init", 0);
    let lm = ReportLM::new(&mut store, &mut r, cfg.lm.clone())?;
    ckpt::load_into(dir, &manifest, &mut store)?;
    Ok((lm, store, cfg, manifest.seed))
}

/// Train once per data fraction (largest first) and write a combined
/// sweep CSV of final validation perplexities.
pub fn data_fraction_sweep(
    reports: &[Vec<usize>],
    base: &LmTrainConfig,
    fractions: &[f64],
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<(f64, LmRunOutput)>> {
    if fractions.is_empty() {
        return Err(Error::config("data fraction sweep needs fractions"));
    }
    let mut runs = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let cfg = LmTrainConfig {
            data_fraction: f,
            ..base.clone()
        };
        let sub_dir = out_dir.map(|d| d.join(format!("fraction_{f}")));
        let run = pretrain_report_lm(reports, &cfg, seed, sub_dir.as_deref())?;
        runs.push((f, run));
    }
    if let Some(dir) = out_dir {
        let rows: Vec<Vec<f64>> = runs
            .iter()
            .map(|(f, r)| vec![*f, r.final_val_ppl])
            .collect();
        write_csv(&dir.join("ppl_sweep.csv"), &["fraction", "final_val_ppl"], &rows)?;
    }
    Ok(runs)
}
