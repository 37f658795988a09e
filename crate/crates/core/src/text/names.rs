//! Sequence-name and study-name encoders.
//!
//! The sequence-name encoder is a small transformer; the study-name
//! encoder is a single-layer LSTM. Both map a normalized name to a
//! unit-norm embedding in the shared token width. The sequence-name
//! encoder can be pretrained by contrasting names against the mean
//! foreground-token latents of the series that carry them, which pulls
//! names with the same imaging plane together (series of one plane
//! share their native token geometry).

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::cohort::StudyRecord;
use crate::error::{Error, Result};
use crate::nn::layers::{sinusoidal_encoding, Linear, LstmCell, TransformerBlock};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::params::{init, ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::rng;
use crate::text::vocab::{Vocabulary, UNK};
use crate::tokenizer::{filter_background, patch_volume, BackgroundFilter, PatchSpec};
use crate::vq::VqModel;

/// Shared shape hyperparameters for both name encoders.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NameEncoderConfig {
    pub vocab_size: usize,
    /// Internal embedding width.
    pub width: usize,
    /// Transformer depth (sequence-name encoder only).
    pub depth: usize,
    pub heads: usize,
    /// Output embedding dimension (the hierarchical model's token width).
    pub out_dim: usize,
}

impl Default for NameEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            width: 32,
            depth: 1,
            heads: 4,
            out_dim: 128,
        }
    }
}

impl NameEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("name encoder needs a vocabulary size"));
        }
        if self.width == 0 || self.out_dim == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::config("name encoder dims must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config("width must divide evenly into heads"));
        }
        Ok(())
    }
}

/// Token ids for a name; empty names map to the unknown token so they
/// still receive a dedicated embedding.
pub fn name_ids(vocab: &Vocabulary, name: &str) -> Vec<usize> {
    let ids = vocab.encode(name);
    if ids.is_empty() {
        vec![UNK]
    } else {
        ids
    }
}

/// Transformer encoder over sequence-name tokens (mean-pooled).
#[derive(Debug, Clone)]
pub struct SeqNameEncoder {
    pub cfg: NameEncoderConfig,
    emb: ParamId,
    blocks: Vec<TransformerBlock>,
    proj: Linear,
}

impl SeqNameEncoder {
    pub fn new(
        store: &mut ParamStore,
        r: &mut rng::Rng,
        cfg: NameEncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let emb = store.add(
            "esn.emb",
            init::normal(r, &[cfg.vocab_size, cfg.width], 0.02),
        );
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, r, &format!("esn.blk{i}"), cfg.width, cfg.heads, false))
            .collect();
        let proj = Linear::new(store, r, "esn.proj", cfg.width, cfg.out_dim, true);
        Ok(Self {
            cfg,
            emb,
            blocks,
            proj,
        })
    }

    /// (out_dim,) unit-norm embedding of a token id sequence.
    pub fn forward_ids(&self, t: &Tape, ids: &[usize]) -> Var {
        assert!(!ids.is_empty(), "encode empty names as the unknown token");
        let mut h = t.gather_rows(t.param(self.emb), ids);
        let pe = sinusoidal_encoding(ids.len(), self.cfg.width);
        h = t.add(h, t.constant(pe.into_dyn()));
        for blk in &self.blocks {
            h = blk.forward(t, h);
        }
        let pooled = t.mean_rows(h);
        let row = t.reshape(pooled, &[1, self.cfg.width]);
        let out = self.proj.forward(t, row);
        let unit = t.l2_normalize_rows(out, 1e-12);
        t.reshape(unit, &[self.cfg.out_dim])
    }

    /// Eval-mode embedding of a name string.
    pub fn embed(&self, store: &ParamStore, vocab: &Vocabulary, name: &str) -> Array1<f64> {
        let ids = name_ids(vocab, name);
        let t = Tape::new(store);
        let v = self.forward_ids(&t, &ids);
        to_vec1(t.value_owned(v))
    }
}

/// Recurrent (LSTM) encoder over study-name tokens (final hidden state).
#[derive(Debug, Clone)]
pub struct StudyNameEncoder {
    pub cfg: NameEncoderConfig,
    emb: ParamId,
    cell: LstmCell,
    proj: Linear,
}

impl StudyNameEncoder {
    pub fn new(
        store: &mut ParamStore,
        r: &mut rng::Rng,
        cfg: NameEncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let emb = store.add(
            "estn.emb",
            init::normal(r, &[cfg.vocab_size, cfg.width], 0.02),
        );
        let cell = LstmCell::new(store, r, "estn.lstm", cfg.width, cfg.width);
        let proj = Linear::new(store, r, "estn.proj", cfg.width, cfg.out_dim, true);
        Ok(Self {
            cfg,
            emb,
            cell,
            proj,
        })
    }

    /// (out_dim,) unit-norm embedding of a token id sequence.
    pub fn forward_ids(&self, t: &Tape, ids: &[usize]) -> Var {
        assert!(!ids.is_empty(), "encode empty names as the unknown token");
        let rows = t.gather_rows(t.param(self.emb), ids);
        let mut h = t.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, self.cfg.width])));
        let mut c = h;
        for i in 0..ids.len() {
            let x = t.reshape(t.row(rows, i), &[1, self.cfg.width]);
            let (h2, c2) = self.cell.step(t, x, h, c);
            h = h2;
            c = c2;
        }
        let out = self.proj.forward(t, h);
        let unit = t.l2_normalize_rows(out, 1e-12);
        t.reshape(unit, &[self.cfg.out_dim])
    }

    /// Eval-mode embedding of a name string.
    pub fn embed(&self, store: &ParamStore, vocab: &Vocabulary, name: &str) -> Array1<f64> {
        let ids = name_ids(vocab, name);
        let t = Tape::new(store);
        let v = self.forward_ids(&t, &ids);
        to_vec1(t.value_owned(v))
    }
}

fn to_vec1(a: ndarray::ArrayD<f64>) -> Array1<f64> {
    a.into_dimensionality::<ndarray::Ix1>()
        .expect("1-d embedding")
}

/// One series' pretraining pair: normalized sequence name plus the mean
/// latent of its foreground tokens in native presentation.
pub struct SeriesLatent {
    pub name: String,
    pub plane: crate::cohort::Plane,
    pub latent: Array1<f64>,
}

/// Mean foreground-token encoder latents per series of every study.
/// Tokens are encoded in their native shape: series of the same plane
/// share token geometry, so plane structure survives into the targets.
/// Series whose tokens are all background are skipped.
pub fn series_latents(
    records: &[StudyRecord],
    vq: &VqModel,
    patch: &PatchSpec,
    filter: &BackgroundFilter,
) -> Result<Vec<SeriesLatent>> {
    let mut out = Vec::new();
    for rec in records {
        for (meta, vol) in &rec.sequences {
            let grid = patch_volume(vol, patch)?;
            let kept = filter_background(&grid, filter);
            if kept.tokens.is_empty() {
                continue;
            }
            let views: Vec<_> = kept.tokens.iter().map(|tok| tok.voxels.clone()).collect();
            let mut mean = Array1::<f64>::zeros(vq.arch.code_dim);
            let mut n = 0.0;
            for chunk in views.chunks(64) {
                let z = vq.encode_views(chunk)?;
                for row in z.rows() {
                    mean = mean + row.to_owned();
                    n += 1.0;
                }
            }
            out.push(SeriesLatent {
                name: crate::text::vocab::normalize_words(&meta.sequence_name).join(" "),
                plane: meta.plane,
                latent: mean / n,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::degenerate("no foreground series for name pretraining"));
    }
    Ok(out)
}

/// Hyperparameters for sequence-name pretraining.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NamePretrainConfig {
    pub encoder: NameEncoderConfig,
    pub steps: usize,
    pub lr: f64,
    /// Softmax temperature of the symmetric contrastive loss.
    pub temperature: f64,
    pub log_every: usize,
}

impl Default for NamePretrainConfig {
    fn default() -> Self {
        Self {
            encoder: NameEncoderConfig::default(),
            steps: 300,
            lr: 1e-3,
            temperature: 0.1,
            log_every: 10,
        }
    }
}

/// Pretraining artifacts: the encoder (plus the latent projector used
/// only during pretraining) inside their own parameter store.
pub struct NamePretrainOutput {
    pub store: ParamStore,
    pub encoder: SeqNameEncoder,
    pub curve: Vec<(usize, f64)>,
}

/// Contrast each distinct sequence name against the mean foreground
/// latent of one of its series (symmetric InfoNCE over distinct names).
pub fn pretrain_sequence_name_encoder(
    records: &[StudyRecord],
    vq: &VqModel,
    vocab: &Vocabulary,
    cfg: &NamePretrainConfig,
    seed: u64,
) -> Result<NamePretrainOutput> {
    if cfg.temperature <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    let series = series_latents(records, vq, &PatchSpec::default(), &BackgroundFilter::default())?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in series.iter().enumerate() {
        groups.entry(&s.name).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::degenerate(
            "name pretraining needs at least two distinct sequence names",
        ));
    }
    let names: Vec<&str> = groups.keys().copied().collect();
    let ids_per_name: Vec<Vec<usize>> = names.iter().map(|n| name_ids(vocab, n)).collect();
    let code_dim = vq.arch.code_dim;

    let mut store = ParamStore::new();
    let mut init_rng = rng::stream(seed, "esn-init", 0);
    let encoder = SeqNameEncoder::new(&mut store, &mut init_rng, cfg.encoder.clone())?;
    let latproj = Linear::new(
        &mut store,
        &mut init_rng,
        "esn.latproj",
        code_dim,
        cfg.encoder.out_dim,
        true,
    );
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        store.len(),
    );

    let n = names.len();
    let diag: Vec<usize> = (0..n).collect();
    let mut curve = Vec::new();
    for step in 1..=cfg.steps {
        let mut r = rng::stream(seed, "esn-step", step as u64);
        let mut targets = Array2::<f64>::zeros((n, code_dim));
        for (row, name) in names.iter().enumerate() {
            let members = &groups[name];
            let pick = members[r.random_range(0..members.len())];
            targets.row_mut(row).assign(&series[pick].latent);
        }
        let (loss_val, grads) = {
            let t = Tape::new(&store);
            let name_rows: Vec<Var> = ids_per_name
                .iter()
                .map(|ids| encoder.forward_ids(&t, ids))
                .collect();
            let names_m = t.stack_rows(&name_rows);
            let lat = latproj.forward(&t, t.constant(targets.into_dyn()));
            let lat = t.l2_normalize_rows(lat, 1e-12);
            let logits = t.scale(t.matmul(names_m, t.transpose(lat)), 1.0 / cfg.temperature);
            let l_a = t.cross_entropy_rows(logits, &diag);
            let l_b = t.cross_entropy_rows(t.transpose(logits), &diag);
            let loss = t.scale(t.add(l_a, l_b), 0.5);
            let v = t.scalar(loss);
            if !v.is_finite() {
                return Err(Error::training(format!(
                    "non-finite name pretraining loss at step {step}"
                )));
            }
            (v, t.backward(loss))
        };
        adam.step(&mut store, &grads);
        if step % cfg.log_every == 0 || step == cfg.steps {
            curve.push((step, loss_val));
        }
    }
    Ok(NamePretrainOutput {
        store,
        encoder,
        curve,
    })
}

/// Mean cosine of within-plane vs across-plane sequence-name embedding
/// pairs over the distinct names present in `records`.
pub fn plane_cosine_split(
    records: &[StudyRecord],
    encoder: &SeqNameEncoder,
    store: &ParamStore,
    vocab: &Vocabulary,
) -> Result<(f64, f64)> {
    let mut by_name: BTreeMap<String, crate::cohort::Plane> = BTreeMap::new();
    for rec in records {
        for (meta, _) in &rec.sequences {
            by_name
                .entry(crate::text::vocab::normalize_words(&meta.sequence_name).join(" "))
                .or_insert(meta.plane);
        }
    }
    let entries: Vec<(String, crate::cohort::Plane)> = by_name.into_iter().collect();
    if entries.len() < 2 {
        return Err(Error::degenerate("need at least two distinct names"));
    }
    let embs: Vec<Array1<f64>> = entries
        .iter()
        .map(|(n, _)| encoder.embed(store, vocab, n))
        .collect();
    let mut within = (0.0, 0usize);
    let mut across = (0.0, 0usize);
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let cos = embs[i].dot(&embs[j]);
            if entries[i].1 == entries[j].1 {
                within.0 += cos;
                within.1 += 1;
            } else {
                across.0 += cos;
                across.1 += 1;
            }
        }
    }
    if within.1 == 0 || across.1 == 0 {
        return Err(Error::degenerate(
            "name set lacks both within-plane and across-plane pairs",
        ));
    }
    Ok((within.0 / within.1 as f64, across.0 / across.1 as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort_records, CohortConfig};
    use crate::vq::VqArch;

    fn tiny_cfg(vocab: &Vocabulary) -> NameEncoderConfig {
        NameEncoderConfig {
            vocab_size: vocab.len(),
            width: 16,
            depth: 1,
            heads: 2,
            out_dim: 24,
            ..Default::default()
        }
    }

    #[test]
    fn embeddings_are_deterministic_and_unit_norm() {
        let vocab = Vocabulary::from_corpus(["ax t1", "cor flair", "mri brain wo contrast"]);
        let mut store = ParamStore::new();
        let mut r = rng::root(3);
        let esn = SeqNameEncoder::new(&mut store, &mut r, tiny_cfg(&vocab)).unwrap();
        let estn = StudyNameEncoder::new(&mut store, &mut r, tiny_cfg(&vocab)).unwrap();
        for name in ["AX T1", "COR FLAIR", "MRI BRAIN WO CONTRAST"] {
            let a = esn.embed(&store, &vocab, name);
            let b = esn.embed(&store, &vocab, name);
            assert_eq!(a, b);
            assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-5);
            let c = estn.embed(&store, &vocab, name);
            let d = estn.embed(&store, &vocab, name);
            assert_eq!(c, d);
            assert!((c.dot(&c).sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn case_folding_makes_names_identical() {
        let vocab = Vocabulary::from_corpus(["ax t1"]);
        let mut store = ParamStore::new();
        let mut r = rng::root(4);
        let esn = SeqNameEncoder::new(&mut store, &mut r, tiny_cfg(&vocab)).unwrap();
        assert_eq!(
            esn.embed(&store, &vocab, "AX T1"),
            esn.embed(&store, &vocab, "ax t1")
        );
    }

    #[test]
    fn empty_name_uses_unknown_token() {
        let vocab = Vocabulary::from_corpus(["ax t1"]);
        let mut store = ParamStore::new();
        let mut r = rng::root(5);
        let esn = SeqNameEncoder::new(&mut store, &mut r, tiny_cfg(&vocab)).unwrap();
        let estn = StudyNameEncoder::new(&mut store, &mut r, tiny_cfg(&vocab)).unwrap();
        assert_eq!(name_ids(&vocab, ""), vec![UNK]);
        let empty = esn.embed(&store, &vocab, "");
        let t = Tape::new(&store);
        let unk = to_vec1(t.value_owned(esn.forward_ids(&t, &[UNK])));
        assert_eq!(empty, unk);
        let empty2 = estn.embed(&store, &vocab, "");
        let unk2 = to_vec1(t.value_owned(estn.forward_ids(&t, &[UNK])));
        assert_eq!(empty2, unk2);
    }

    #[test]
    fn distinct_study_names_get_distinct_embeddings() {
        let names = crate::cohort::templates::STUDY_NAMES;
        let vocab = Vocabulary::from_corpus(names.iter().copied());
        let mut store = ParamStore::new();
        let mut r = rng::root(6);
        let estn = StudyNameEncoder::new(&mut store, &mut r, tiny_cfg(&vocab)).unwrap();
        let embs: Vec<Array1<f64>> = names
            .iter()
            .map(|n| estn.embed(&store, &vocab, n))
            .collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let diff = (&embs[i] - &embs[j]).mapv(f64::abs).sum();
                assert!(diff > 1e-8, "study names {i} and {j} collided");
            }
        }
    }

    fn small_cohort(n: usize, seed: u64) -> (Vec<StudyRecord>, Vocabulary) {
        let cfg = CohortConfig {
            n_studies: n,
            volume_shape: [32, 32, 8],
            sequences_min: 2,
            sequences_max: 4,
            ..Default::default()
        };
        generate_cohort_records(&cfg, seed).unwrap()
    }

    #[test]
    fn pretraining_clusters_names_by_plane() {
        let (records, vocab) = small_cohort(30, 41);
        let mut r = rng::root(77);
        let vq = VqModel::new(
            VqArch {
                code_dim: 16,
                codebook_size: 32,
                enc_channels: [4, 8],
                dec_channels: [8, 4, 4],
                ..Default::default()
            },
            &mut r,
        )
        .unwrap();
        let cfg = NamePretrainConfig {
            encoder: NameEncoderConfig {
                vocab_size: vocab.len(),
                width: 16,
                depth: 1,
                heads: 2,
                out_dim: 24,
                ..Default::default()
            },
            steps: 250,
            ..Default::default()
        };
        let out = pretrain_sequence_name_encoder(&records, &vq, &vocab, &cfg, 13).unwrap();
        assert!(out.curve.first().unwrap().1 > out.curve.last().unwrap().1);
        let (within, across) =
            plane_cosine_split(&records, &out.encoder, &out.store, &vocab).unwrap();
        assert!(
            within > across,
            "within-plane cosine {within:.3} should exceed across-plane {across:.3}"
        );
    }

    #[test]
    fn pretraining_is_reproducible() {
        let (records, vocab) = small_cohort(6, 42);
        let mut r = rng::root(78);
        let vq = VqModel::new(
            VqArch {
                code_dim: 8,
                codebook_size: 16,
                enc_channels: [2, 4],
                dec_channels: [4, 4, 4],
                ..Default::default()
            },
            &mut r,
        )
        .unwrap();
        let cfg = NamePretrainConfig {
            encoder: NameEncoderConfig {
                vocab_size: vocab.len(),
                width: 8,
                depth: 1,
                heads: 2,
                out_dim: 12,
                ..Default::default()
            },
            steps: 6,
            log_every: 1,
            ..Default::default()
        };
        let a = pretrain_sequence_name_encoder(&records, &vq, &vocab, &cfg, 5).unwrap();
        let b = pretrain_sequence_name_encoder(&records, &vq, &vocab, &cfg, 5).unwrap();
        assert_eq!(a.curve, b.curve);
    }
}
