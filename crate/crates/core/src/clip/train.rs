//! Contrastive training loop: precompute frozen-tokenizer inputs per
//! study, then jointly train both transformer levels, both name
//! encoders, the patient projection, the temperature, and (unless
//! frozen) the report language model.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng as _;

use crate::ckpt;
use crate::cohort::{Split, StudyRecord};
use crate::error::{Error, Result};
use crate::hier::{HierConfig, SeriesTokens, StudyEncoder};
use crate::log::{self, JsonlLog};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::rng;
use crate::text::{name_ids, LmConfig, NameEncoderConfig, ReportLM, SeqNameEncoder, StudyNameEncoder, Vocabulary};
use crate::tokenizer::{
    filter_background, order_between, patch_volume, positional_encode, BackgroundFilter,
    PatchSpec, PositionalEncoding,
};
use crate::vq::{quantize_batch, VqModel};

use super::{
    clip_loss_on_tape, evaluate_retrieval, patient_discrimination_loss_on_tape, ClipConfig,
    LossBreakdown,
};

/// Frozen-tokenizer inputs for one study: quantized token latents with
/// positional encodings per series, name token ids, and the framed
/// report ids. Computed once, reused every step.
#[derive(Debug, Clone)]
pub struct StudyInputs {
    pub study_id: String,
    pub split: Split,
    pub series: Vec<SeriesTokens>,
    pub series_name_ids: Vec<Vec<usize>>,
    pub study_name_ids: Vec<usize>,
    pub report_ids: Vec<usize>,
}

/// Run every study through the frozen tokenizer: patch, drop background
/// tokens, axis-normalize each token, encode and quantize, and attach
/// positional encodings. Series with no foreground tokens are dropped;
/// a study losing all its series is an error.
pub fn prepare_study_inputs(
    records: &[StudyRecord],
    vq: &VqModel,
    vocab: &Vocabulary,
    patch: &PatchSpec,
    filter: &BackgroundFilter,
    penc: &PositionalEncoding,
    report_context: usize,
) -> Result<Vec<StudyInputs>> {
    penc.validate()?;
    let codebook = vq
        .store
        .value(vq.codebook_id)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("codebook is a matrix")
        .to_owned();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let mut series = Vec::new();
        let mut series_name_ids = Vec::new();
        for (meta, vol) in &rec.sequences {
            let grid = patch_volume(vol, patch)?;
            let fg = filter_background(&grid, filter);
            if fg.tokens.is_empty() {
                continue;
            }
            let mut views = Vec::with_capacity(fg.tokens.len());
            for tok in &fg.tokens {
                let shape = [
                    tok.voxels.shape()[0],
                    tok.voxels.shape()[1],
                    tok.voxels.shape()[2],
                ];
                let order = order_between(shape, vq.arch.patch_dims).ok_or_else(|| {
                    Error::shape(format!(
                        "token shape {shape:?} is not a permutation of {:?}",
                        vq.arch.patch_dims
                    ))
                })?;
                views.push(
                    tok.voxels
                        .clone()
                        .permuted_axes([order[0], order[1], order[2]])
                        .as_standard_layout()
                        .to_owned(),
                );
            }
            let mut z = Array2::<f64>::zeros((views.len(), vq.arch.code_dim));
            for (start, chunk) in views.chunks(64).enumerate() {
                let rows = vq.encode_views(chunk)?;
                z.slice_mut(ndarray::s![start * 64..start * 64 + chunk.len(), ..])
                    .assign(&rows);
            }
            let (_, latents) = quantize_batch(&z.view(), &codebook.view());
            let mut positions = Array2::<f64>::zeros((fg.tokens.len(), penc.dims));
            for (i, tok) in fg.tokens.iter().enumerate() {
                positions
                    .row_mut(i)
                    .assign(&positional_encode(tok.grid_pos, fg.grid_extents, penc));
            }
            series.push(SeriesTokens { latents, positions });
            series_name_ids.push(name_ids(vocab, &meta.sequence_name));
        }
        if series.is_empty() {
            return Err(Error::degenerate(format!(
                "study {} has no series with foreground tokens",
                rec.study_id
            )));
        }
        let mut report_ids = vocab.encode_framed(&rec.full_report.text);
        report_ids.truncate(report_context);
        out.push(StudyInputs {
            study_id: rec.study_id.clone(),
            split: rec.split,
            series,
            series_name_ids,
            study_name_ids: name_ids(vocab, &rec.study_name),
            report_ids,
        });
    }
    Ok(out)
}

/// Architecture of everything trained at this stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClipBundleConfig {
    pub hier: HierConfig,
    pub names: NameEncoderConfig,
    pub lm: LmConfig,
}

impl ClipBundleConfig {
    pub fn validate(&self) -> Result<()> {
        self.hier.validate()?;
        self.names.validate()?;
        self.lm.validate()?;
        if self.names.out_dim != self.hier.name_dim {
            return Err(Error::config(format!(
                "name encoders emit {} dims but the study encoder expects {}",
                self.names.out_dim, self.hier.name_dim
            )));
        }
        if self.lm.embed_dim != self.hier.embed_dim {
            return Err(Error::config(format!(
                "report embeddings are {} wide but study embeddings are {}",
                self.lm.embed_dim, self.hier.embed_dim
            )));
        }
        Ok(())
    }
}

/// All trainable components on one parameter store, plus the learnable
/// log-temperature. The volume tokenizer stays outside: its latents
/// enter as constants.
#[derive(Debug)]
pub struct ClipBundle {
    pub cfg: ClipBundleConfig,
    pub store: ParamStore,
    pub encoder: StudyEncoder,
    pub esn: SeqNameEncoder,
    pub estn: StudyNameEncoder,
    pub lm: ReportLM,
    pub tau: ParamId,
}

impl ClipBundle {
    pub fn new(cfg: ClipBundleConfig, tau_init: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "clip-init", 0);
        let esn = SeqNameEncoder::new(&mut store, &mut r, cfg.names.clone())?;
        let estn = StudyNameEncoder::new(&mut store, &mut r, cfg.names.clone())?;
        let lm = ReportLM::new(&mut store, &mut r, cfg.lm.clone())?;
        let encoder = StudyEncoder::new(&mut store, &mut r, cfg.hier)?;
        let tau = store.add("clip.tau", ArrayD::from_elem(IxDyn(&[]), tau_init));
        Ok(Self {
            cfg,
            store,
            encoder,
            esn,
            estn,
            lm,
            tau,
        })
    }

    /// Copy identically named parameters from a pretrained store
    /// (e.g. the report language model or the name encoders).
    pub fn warm_start(&mut self, pretrained: &ParamStore) -> Result<usize> {
        self.store.adopt_matching(pretrained)
    }

    /// Study embedding (1, embed_dim) plus one unit-norm patient
    /// projection row (1, patdis_dim) per series.
    fn study_on_tape(&self, t: &Tape, study: &StudyInputs) -> Result<(Var, Vec<Var>)> {
        let mut regs = Vec::with_capacity(study.series.len());
        let mut proj = Vec::with_capacity(study.series.len());
        for (series, nids) in study.series.iter().zip(&study.series_name_ids) {
            let name = self.esn.forward_ids(t, nids);
            let reg = self.encoder.vit_seq.embedding_on_tape(t, series, name)?;
            proj.push(self.encoder.patdis.forward_on_tape(t, reg));
            regs.push(reg);
        }
        let study_name = self.estn.forward_ids(t, &study.study_name_ids);
        let emb = self
            .encoder
            .vit_st
            .embedding_on_tape(t, &regs, study_name)?;
        Ok((emb, proj))
    }

    /// Eval-mode study embedding.
    pub fn encode_study_eval(&self, study: &StudyInputs) -> Result<Array1<f64>> {
        let t = Tape::new(&self.store);
        let (emb, _) = self.study_on_tape(&t, study)?;
        Ok(flat(t.value_owned(emb)))
    }

    /// Eval-mode report embedding from framed ids.
    pub fn encode_report_eval(&self, report_ids: &[usize]) -> Array1<f64> {
        let t = Tape::new(&self.store);
        let v = self.lm.encode_ids_on_tape(&t, report_ids);
        flat(t.value_owned(v))
    }
}

fn flat(a: ArrayD<f64>) -> Array1<f64> {
    Array1::from_vec(a.iter().copied().collect())
}

/// Which studies a batch holds and which batch row each flattened
/// series belongs to. Every sampled study contributes all its series,
/// and its report rides along at the same row index.
#[derive(Debug, Clone)]
pub struct BatchAssembly {
    pub study_indices: Vec<usize>,
    pub seq_map: Vec<usize>,
}

pub fn assemble_batch(inputs: &[StudyInputs], study_indices: &[usize]) -> Result<BatchAssembly> {
    if study_indices.is_empty() {
        return Err(Error::degenerate("empty batch"));
    }
    let mut seq_map = Vec::new();
    for (row, &si) in study_indices.iter().enumerate() {
        let study = inputs
            .get(si)
            .ok_or_else(|| Error::config(format!("study index {si} out of range")))?;
        seq_map.extend(std::iter::repeat_n(row, study.series.len()));
    }
    Ok(BatchAssembly {
        study_indices: study_indices.to_vec(),
        seq_map,
    })
}

/// One training-curve row.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ClipCurvePoint {
    pub step: usize,
    pub loss_clip: f64,
    pub loss_patdis: f64,
    pub total: f64,
    pub exp_tau: f64,
}

/// Retrieval scores on the held-out slice at one checkpoint.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RetrievalPoint {
    pub step: usize,
    pub k: usize,
    pub top1_image_to_text: f64,
    pub topk_image_to_text: f64,
    pub top1_text_to_image: f64,
    pub topk_text_to_image: f64,
}

#[derive(Debug)]
pub struct ClipRunOutput {
    pub bundle: ClipBundle,
    pub curve: Vec<ClipCurvePoint>,
    pub evals: Vec<RetrievalPoint>,
}

fn eval_retrieval_point(
    bundle: &ClipBundle,
    val: &[StudyInputs],
    k: usize,
    step: usize,
) -> Result<RetrievalPoint> {
    let d = bundle.cfg.hier.embed_dim;
    let mut s = Array2::<f64>::zeros((val.len(), d));
    let mut r = Array2::<f64>::zeros((val.len(), d));
    for (i, study) in val.iter().enumerate() {
        s.row_mut(i).assign(&bundle.encode_study_eval(study)?);
        r.row_mut(i).assign(&bundle.encode_report_eval(&study.report_ids));
    }
    let at_k = evaluate_retrieval(&s, &r, k)?;
    let at_1 = evaluate_retrieval(&s, &r, 1)?;
    Ok(RetrievalPoint {
        step,
        k,
        top1_image_to_text: at_1.image_to_text,
        topk_image_to_text: at_k.image_to_text,
        top1_text_to_image: at_1.text_to_image,
        topk_text_to_image: at_k.text_to_image,
    })
}

fn save_checkpoint(
    out_dir: Option<&Path>,
    bundle: &ClipBundle,
    cfg: &ClipConfig,
    seed: u64,
    step: usize,
) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    let config = serde_json::json!({ "bundle": bundle.cfg, "train": cfg });
    ckpt::save(
        &dir.join(format!("step_{step:06}")),
        "clip",
        seed,
        step,
        config,
        serde_json::Value::Null,
        &bundle.store,
    )
}

/// Train the bundle on `train`, evaluating retrieval on `val` at every
/// checkpoint (including step 0, before any update). A non-finite loss
/// aborts with an error; the last checkpoint on disk stays valid.
pub fn train_clip(
    train: &[StudyInputs],
    val: &[StudyInputs],
    mut bundle: ClipBundle,
    cfg: &ClipConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<ClipRunOutput> {
    cfg.validate()?;
    if train.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} training studies",
            cfg.batch_size,
            train.len()
        )));
    }
    if !val.is_empty() && val.len() < cfg.eval_k {
        return Err(Error::config(format!(
            "eval_k {} exceeds the {} validation studies",
            cfg.eval_k,
            val.len()
        )));
    }
    let mut logger = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            JsonlLog::to_file(&dir.join("train_log.jsonl"))?
        }
        None => JsonlLog::in_memory(),
    };
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        bundle.store.len(),
    );
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();

    let eval_and_checkpoint = |bundle: &ClipBundle,
                                   step: usize,
                                   evals: &mut Vec<RetrievalPoint>,
                                   logger: &mut JsonlLog|
     -> Result<()> {
        if !val.is_empty() {
            let point = eval_retrieval_point(bundle, val, cfg.eval_k, step)?;
            logger.log(serde_json::json!({ "event": "retrieval_eval", "point": point }))?;
            evals.push(point);
        }
        save_checkpoint(out_dir, bundle, cfg, seed, step)
    };

    eval_and_checkpoint(&bundle, 0, &mut evals, &mut logger)?;

    for step in 1..=cfg.steps {
        let mut r = rng::stream(seed, "clip-step", step as u64);
        let mut pool: Vec<usize> = (0..train.len()).collect();
        for i in 0..cfg.batch_size {
            let j = r.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let batch = assemble_batch(train, &pool[..cfg.batch_size])?;

        let t = Tape::new(&bundle.store);
        let mut s_rows = Vec::with_capacity(cfg.batch_size);
        let mut r_rows = Vec::with_capacity(cfg.batch_size);
        let mut p_rows = Vec::new();
        for &si in &batch.study_indices {
            let study = &train[si];
            let (emb, proj) = bundle.study_on_tape(&t, study)?;
            s_rows.push(emb);
            p_rows.extend(proj);
            let report = if cfg.freeze_language_model {
                t.constant(
                    bundle
                        .encode_report_eval(&study.report_ids)
                        .into_dyn(),
                )
            } else {
                bundle.lm.encode_ids_on_tape(&t, &study.report_ids)
            };
            r_rows.push(t.reshape(report, &[1, bundle.cfg.hier.embed_dim]));
        }
        let s = t.concat_rows(&s_rows);
        let rep = t.concat_rows(&r_rows);
        let loss_clip = clip_loss_on_tape(&t, s, rep, t.param(bundle.tau))?;
        let proj = t.concat_rows(&p_rows);
        let loss_patdis =
            patient_discrimination_loss_on_tape(&t, proj, &batch.seq_map, cfg.tau_p)?;
        let total = t.add(loss_clip, t.scale(loss_patdis, cfg.lambda_patdis));

        let breakdown = LossBreakdown {
            loss_clip: t.scalar(loss_clip),
            loss_patdis: t.scalar(loss_patdis),
            total: t.scalar(total),
        };
        if !breakdown.total.is_finite() {
            logger.log(serde_json::json!({
                "event": "non_finite_abort", "step": step, "loss": breakdown,
            }))?;
            logger.flush()?;
            return Err(Error::degenerate(format!(
                "non-finite loss at step {step}; the last checkpoint on disk is the most recent good state"
            )));
        }
        let grads = t.backward(total);
        adam.step(&mut bundle.store, &grads);

        let tau_val = bundle.store.value(bundle.tau)[IxDyn(&[])];
        let exp_tau = tau_val.exp().min(100.0);
        let point = ClipCurvePoint {
            step,
            loss_clip: breakdown.loss_clip,
            loss_patdis: breakdown.loss_patdis,
            total: breakdown.total,
            exp_tau,
        };
        logger.log(serde_json::json!({ "event": "clip_step", "point": point }))?;
        curve.push(point);

        if step % cfg.checkpoint_every == 0 {
            eval_and_checkpoint(&bundle, step, &mut evals, &mut logger)?;
        }
    }
    if cfg.steps % cfg.checkpoint_every != 0 {
        eval_and_checkpoint(&bundle, cfg.steps, &mut evals, &mut logger)?;
    }
    if let Some(dir) = out_dir {
        let config = serde_json::json!({ "bundle": bundle.cfg, "train": cfg });
        ckpt::save(
            &dir.join("final"),
            "clip",
            seed,
            cfg.steps,
            config,
            serde_json::Value::Null,
            &bundle.store,
        )?;
        log::write_csv(
            &dir.join("clip_curve.csv"),
            &["step", "loss_clip", "loss_patdis", "total", "exp_tau"],
            &curve
                .iter()
                .map(|p| vec![p.step as f64, p.loss_clip, p.loss_patdis, p.total, p.exp_tau])
                .collect::<Vec<_>>(),
        )?;
        log::write_csv(
            &dir.join("retrieval_curve.csv"),
            &[
                "step",
                "k",
                "top1_image_to_text",
                "topk_image_to_text",
                "top1_text_to_image",
                "topk_text_to_image",
            ],
            &evals
                .iter()
                .map(|p| {
                    vec![
                        p.step as f64,
                        p.k as f64,
                        p.top1_image_to_text,
                        p.topk_image_to_text,
                        p.top1_text_to_image,
                        p.topk_text_to_image,
                    ]
                })
                .collect::<Vec<_>>(),
        )?;
    }
    logger.flush()?;
    Ok(ClipRunOutput {
        bundle,
        curve,
        evals,
    })
}
