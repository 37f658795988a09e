//! Two-level study encoder. A sequence transformer reads one series'
//! volume-token latents (each concatenated with its positional encoding)
//! plus the embedded series name, and emits a register vector; a study
//! transformer reads all series registers plus the embedded study name
//! — with no positional encoding, so series order cannot matter — and
//! emits one unit-norm study vector. A bias-free linear head projects
//! series registers into the space used by the patient-discrimination
//! loss.

use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear, TransformerBlock};
use crate::nn::params::{init, ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::rng;

/// Dimensions shared by both transformer levels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HierConfig {
    /// Per-token latent width produced by the volume autoencoder.
    pub code_dim: usize,
    /// Positional-encoding width concatenated onto each token latent.
    pub pos_dim: usize,
    /// Width of series/study name embeddings.
    pub name_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Output width of the study vector (the retrieval space).
    pub embed_dim: usize,
    /// Output width of the patient-discrimination projection.
    pub patdis_dim: usize,
}

impl Default for HierConfig {
    fn default() -> Self {
        Self {
            code_dim: 32,
            pos_dim: 48,
            name_dim: 128,
            width: 128,
            depth: 4,
            heads: 4,
            embed_dim: 128,
            patdis_dim: 64,
        }
    }
}

impl HierConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.code_dim,
            self.pos_dim,
            self.name_dim,
            self.width,
            self.depth,
            self.heads,
            self.embed_dim,
            self.patdis_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::config("all encoder dimensions must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config("width must divide evenly into heads"));
        }
        Ok(())
    }
}

/// One series' worth of encoder input: one row per foreground token.
#[derive(Debug, Clone)]
pub struct SeriesTokens {
    /// n × code_dim token latents.
    pub latents: Array2<f64>,
    /// n × pos_dim positional encodings, row-aligned with `latents`.
    pub positions: Array2<f64>,
}

impl SeriesTokens {
    fn check(&self, cfg: &HierConfig) -> Result<()> {
        if self.latents.nrows() == 0 {
            return Err(Error::degenerate(
                "series holds no foreground tokens to encode",
            ));
        }
        if self.latents.nrows() != self.positions.nrows() {
            return Err(Error::shape(format!(
                "{} latents but {} positional rows",
                self.latents.nrows(),
                self.positions.nrows()
            )));
        }
        if self.latents.ncols() != cfg.code_dim || self.positions.ncols() != cfg.pos_dim {
            return Err(Error::shape(format!(
                "token rows are {}+{} wide, encoder expects {}+{}",
                self.latents.ncols(),
                self.positions.ncols(),
                cfg.code_dim,
                cfg.pos_dim
            )));
        }
        Ok(())
    }
}

fn check_unit_norm(vector: &Array1<f64>) -> Result<()> {
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-5 {
        return Err(Error::shape(format!(
            "embedding norm {norm:.8} is not unit"
        )));
    }
    Ok(())
}

/// Unit-norm series register with provenance.
#[derive(Debug, Clone)]
pub struct SequenceEmbedding {
    pub study_id: String,
    /// Index of the series within its study.
    pub index: usize,
    pub vector: Array1<f64>,
}

impl SequenceEmbedding {
    pub fn new(study_id: impl Into<String>, index: usize, vector: Array1<f64>) -> Result<Self> {
        check_unit_norm(&vector)?;
        Ok(Self {
            study_id: study_id.into(),
            index,
            vector,
        })
    }
}

/// Unit-norm study vector with provenance.
#[derive(Debug, Clone)]
pub struct StudyEmbedding {
    pub study_id: String,
    pub vector: Array1<f64>,
}

impl StudyEmbedding {
    pub fn new(study_id: impl Into<String>, vector: Array1<f64>) -> Result<Self> {
        check_unit_norm(&vector)?;
        Ok(Self {
            study_id: study_id.into(),
            vector,
        })
    }
}

/// Series-level transformer: a learnable register row, the projected
/// series-name embedding, and one projected row per token attend to each
/// other; the register row's final hidden state is the series readout.
/// Token order carries no information of its own — each token's position
/// rides along in its own row — so shuffling rows leaves the readout
/// unchanged.
#[derive(Debug)]
pub struct SequenceTransformer {
    cfg: HierConfig,
    in_proj: Linear,
    name_proj: Linear,
    register: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
}

impl SequenceTransformer {
    pub fn new(store: &mut ParamStore, r: &mut rng::Rng, cfg: HierConfig) -> Result<Self> {
        cfg.validate()?;
        let in_proj = Linear::new(
            store,
            r,
            "vitseq.inproj",
            cfg.code_dim + cfg.pos_dim,
            cfg.width,
            true,
        );
        let name_proj = Linear::new(store, r, "vitseq.nameproj", cfg.name_dim, cfg.width, true);
        let register = store.add("vitseq.register", init::normal(r, &[1, cfg.width], 0.02));
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(store, r, &format!("vitseq.blk{i}"), cfg.width, cfg.heads, false)
            })
            .collect();
        let ln_f = LayerNorm::new(store, "vitseq.lnf", cfg.width);
        Ok(Self {
            cfg,
            in_proj,
            name_proj,
            register,
            blocks,
            ln_f,
        })
    }

    /// Raw register readout, shape (1, width). `name_emb` is the series
    /// name embedding, shape (name_dim,) or (1, name_dim).
    pub fn register_on_tape(&self, t: &Tape, series: &SeriesTokens, name_emb: Var) -> Result<Var> {
        series.check(&self.cfg)?;
        let rows = ndarray::concatenate(
            Axis(1),
            &[series.latents.view(), series.positions.view()],
        )
        .expect("row-aligned token inputs");
        let tokens = self.in_proj.forward(t, t.constant(rows.into_dyn()));
        let name = self
            .name_proj
            .forward(t, t.reshape(name_emb, &[1, self.cfg.name_dim]));
        let mut x = t.concat_rows(&[t.param(self.register), name, tokens]);
        for blk in &self.blocks {
            x = blk.forward(t, x);
        }
        let x = self.ln_f.forward(t, x);
        Ok(t.reshape(t.row(x, 0), &[1, self.cfg.width]))
    }

    /// Unit-norm series register, shape (1, width).
    pub fn embedding_on_tape(&self, t: &Tape, series: &SeriesTokens, name_emb: Var) -> Result<Var> {
        Ok(t.l2_normalize_rows(self.register_on_tape(t, series, name_emb)?, 1e-12))
    }

    /// Eval-mode series embedding: (width,) unit-norm vector.
    pub fn encode_sequence(
        &self,
        store: &ParamStore,
        series: &SeriesTokens,
        name_emb: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        let t = Tape::new(store);
        let name = t.constant(name_emb.clone().into_dyn());
        let reg = self.embedding_on_tape(&t, series, name)?;
        Ok(to_vec(t.value_owned(reg)))
    }
}

/// Study-level transformer: a learnable register row, the projected
/// study-name embedding, and one row per series register. No positional
/// information enters at this level, so series order cannot change the
/// output.
#[derive(Debug)]
pub struct StudyTransformer {
    cfg: HierConfig,
    name_proj: Linear,
    register: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    out_proj: Linear,
}

impl StudyTransformer {
    pub fn new(store: &mut ParamStore, r: &mut rng::Rng, cfg: HierConfig) -> Result<Self> {
        cfg.validate()?;
        let name_proj = Linear::new(store, r, "vitst.nameproj", cfg.name_dim, cfg.width, true);
        let register = store.add("vitst.register", init::normal(r, &[1, cfg.width], 0.02));
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(store, r, &format!("vitst.blk{i}"), cfg.width, cfg.heads, false)
            })
            .collect();
        let ln_f = LayerNorm::new(store, "vitst.lnf", cfg.width);
        let out_proj = Linear::new(store, r, "vitst.outproj", cfg.width, cfg.embed_dim, true);
        Ok(Self {
            cfg,
            name_proj,
            register,
            blocks,
            ln_f,
            out_proj,
        })
    }

    /// Unit-norm study vector, shape (1, embed_dim). `seq_registers`
    /// holds one (width,) or (1, width) var per series; `name_emb` is
    /// the study name embedding.
    pub fn embedding_on_tape(
        &self,
        t: &Tape,
        seq_registers: &[Var],
        name_emb: Var,
    ) -> Result<Var> {
        if seq_registers.is_empty() {
            return Err(Error::degenerate("study holds no encoded series"));
        }
        let name = self
            .name_proj
            .forward(t, t.reshape(name_emb, &[1, self.cfg.name_dim]));
        let mut rows = vec![t.param(self.register), name];
        for &reg in seq_registers {
            rows.push(t.reshape(reg, &[1, self.cfg.width]));
        }
        let mut x = t.concat_rows(&rows);
        for blk in &self.blocks {
            x = blk.forward(t, x);
        }
        let x = self.ln_f.forward(t, x);
        let reg = t.reshape(t.row(x, 0), &[1, self.cfg.width]);
        Ok(t.l2_normalize_rows(self.out_proj.forward(t, reg), 1e-12))
    }

    /// Eval-mode study embedding: (embed_dim,) unit-norm vector.
    pub fn encode_study(
        &self,
        store: &ParamStore,
        seq_embeddings: &[Array1<f64>],
        name_emb: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        let t = Tape::new(store);
        let regs: Vec<Var> = seq_embeddings
            .iter()
            .map(|e| t.constant(e.clone().into_dyn()))
            .collect();
        let name = t.constant(name_emb.clone().into_dyn());
        let emb = self.embedding_on_tape(&t, &regs, name)?;
        Ok(to_vec(t.value_owned(emb)))
    }
}

/// Bias-free linear map from series registers into the space scored by
/// the patient-discrimination loss. Bias-free keeps the pre-normalization
/// map exactly additive.
#[derive(Debug)]
pub struct PatientProjection {
    proj: Linear,
    width: usize,
}

impl PatientProjection {
    pub fn new(store: &mut ParamStore, r: &mut rng::Rng, cfg: HierConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            proj: Linear::new(store, r, "patdis.proj", cfg.width, cfg.patdis_dim, false),
            width: cfg.width,
        })
    }

    /// Linear image of the input rows, before normalization.
    pub fn raw_on_tape(&self, t: &Tape, rows: Var) -> Var {
        self.proj.forward(t, rows)
    }

    /// Unit-norm rows, as consumed by the discrimination loss.
    pub fn forward_on_tape(&self, t: &Tape, rows: Var) -> Var {
        t.l2_normalize_rows(self.raw_on_tape(t, rows), 1e-12)
    }

    /// Eval-mode projection of one (width,) vector.
    pub fn project(&self, store: &ParamStore, v: &Array1<f64>) -> Array1<f64> {
        let t = Tape::new(store);
        let x = t.reshape(t.constant(v.clone().into_dyn()), &[1, self.width]);
        to_vec(t.value_owned(self.forward_on_tape(&t, x)))
    }
}

/// Both transformer levels plus the patient projection, built on one
/// parameter store.
#[derive(Debug)]
pub struct StudyEncoder {
    pub cfg: HierConfig,
    pub vit_seq: SequenceTransformer,
    pub vit_st: StudyTransformer,
    pub patdis: PatientProjection,
}

impl StudyEncoder {
    pub fn new(store: &mut ParamStore, r: &mut rng::Rng, cfg: HierConfig) -> Result<Self> {
        Ok(Self {
            cfg,
            vit_seq: SequenceTransformer::new(store, r, cfg)?,
            vit_st: StudyTransformer::new(store, r, cfg)?,
            patdis: PatientProjection::new(store, r, cfg)?,
        })
    }
}

fn to_vec(a: ArrayD<f64>) -> Array1<f64> {
    let flat: Vec<f64> = a.iter().copied().collect();
    Array1::from_vec(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::{BOS, EOS};
    use crate::text::{LmConfig, NameEncoderConfig, ReportLM, SeqNameEncoder, StudyNameEncoder};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn tiny_cfg() -> HierConfig {
        HierConfig {
            code_dim: 8,
            pos_dim: 6,
            name_dim: 16,
            width: 32,
            depth: 2,
            heads: 2,
            embed_dim: 24,
            patdis_dim: 12,
        }
    }

    fn build(seed: u64, cfg: HierConfig) -> (ParamStore, StudyEncoder) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "hier-init", 0);
        let enc = StudyEncoder::new(&mut store, &mut r, cfg).unwrap();
        (store, enc)
    }

    fn random_series(seed: u64, n: usize, cfg: &HierConfig) -> SeriesTokens {
        let mut r = rng::stream(seed, "hier-test", 1);
        let latents = init::normal(&mut r, &[n, cfg.code_dim], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let positions = init::normal(&mut r, &[n, cfg.pos_dim], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        SeriesTokens { latents, positions }
    }

    fn random_name(seed: u64, dim: usize) -> Array1<f64> {
        let mut r = rng::stream(seed, "hier-test", 2);
        let v = init::normal(&mut r, &[dim], 1.0);
        to_vec(v)
    }

    fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn same_tokens_with_swapped_positions_encode_differently() {
        let cfg = tiny_cfg();
        let (store, enc) = build(3, cfg);
        let series = random_series(3, 2, &cfg);
        let name = random_name(3, cfg.name_dim);

        let a = enc.vit_seq.encode_sequence(&store, &series, &name).unwrap();
        // Same two tokens, but each now carries the other's position —
        // a genuinely different input set, unlike reordering rows.
        let mut moved = series.clone();
        let p0 = moved.positions.row(0).to_owned();
        let p1 = moved.positions.row(1).to_owned();
        moved.positions.row_mut(0).assign(&p1);
        moved.positions.row_mut(1).assign(&p0);
        let b = enc.vit_seq.encode_sequence(&store, &moved, &name).unwrap();

        assert!(
            max_abs_diff(&a, &b) > 1e-6,
            "swapping which token carries which position must change the readout"
        );
    }

    #[test]
    fn token_rows_shuffled_with_their_positions_leave_readout_unchanged() {
        let cfg = tiny_cfg();
        let (store, enc) = build(5, cfg);
        let name = random_name(5, cfg.name_dim);
        for n in [1usize, 2, 5, 9] {
            let series = random_series(100 + n as u64, n, &cfg);
            let base = enc.vit_seq.encode_sequence(&store, &series, &name).unwrap();
            let perm: Vec<usize> = (0..n).rev().collect();
            let latents = series.latents.select(Axis(0), &perm);
            let positions = series.positions.select(Axis(0), &perm);
            let shuffled = SeriesTokens { latents, positions };
            let out = enc
                .vit_seq
                .encode_sequence(&store, &shuffled, &name)
                .unwrap();
            assert!(
                max_abs_diff(&base, &out) < 1e-5,
                "row order carries no information (n={n})"
            );
        }
    }

    #[test]
    fn sequence_encoding_is_deterministic_and_unit_norm() {
        let cfg = tiny_cfg();
        let (store, enc) = build(7, cfg);
        let series = random_series(7, 4, &cfg);
        let name = random_name(7, cfg.name_dim);
        let a = enc.vit_seq.encode_sequence(&store, &series, &name).unwrap();
        let b = enc.vit_seq.encode_sequence(&store, &series, &name).unwrap();
        assert_eq!(a, b);
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        SequenceEmbedding::new("study-0", 0, a).unwrap();
    }

    #[test]
    fn empty_series_is_rejected() {
        let cfg = tiny_cfg();
        let (store, enc) = build(9, cfg);
        let series = SeriesTokens {
            latents: Array2::zeros((0, cfg.code_dim)),
            positions: Array2::zeros((0, cfg.pos_dim)),
        };
        let name = random_name(9, cfg.name_dim);
        assert!(enc.vit_seq.encode_sequence(&store, &series, &name).is_err());
    }

    #[test]
    fn study_output_ignores_series_order() {
        let cfg = tiny_cfg();
        let (store, enc) = build(11, cfg);
        let name = random_name(11, cfg.name_dim);
        let seqs: Vec<Array1<f64>> = (0..3)
            .map(|i| {
                let series = random_series(200 + i, 3 + i as usize, &cfg);
                enc.vit_seq.encode_sequence(&store, &series, &name).unwrap()
            })
            .collect();
        let fwd = enc.vit_st.encode_study(&store, &seqs, &name).unwrap();
        let rev: Vec<Array1<f64>> = seqs.iter().rev().cloned().collect();
        let bwd = enc.vit_st.encode_study(&store, &rev, &name).unwrap();
        assert!(
            max_abs_diff(&fwd, &bwd) < 1e-5,
            "series order must not matter at study level"
        );
    }

    #[test]
    fn study_name_changes_the_study_vector() {
        let cfg = tiny_cfg();
        let (store, enc) = build(13, cfg);
        let seqs: Vec<Array1<f64>> = (0..2)
            .map(|i| {
                let series = random_series(300 + i, 4, &cfg);
                let name = random_name(300 + i, cfg.name_dim);
                enc.vit_seq.encode_sequence(&store, &series, &name).unwrap()
            })
            .collect();
        let a = enc
            .vit_st
            .encode_study(&store, &seqs, &random_name(1, cfg.name_dim))
            .unwrap();
        let b = enc
            .vit_st
            .encode_study(&store, &seqs, &random_name(2, cfg.name_dim))
            .unwrap();
        assert!(
            max_abs_diff(&a, &b) > 1e-6,
            "the study-name path must be live"
        );
    }

    #[test]
    fn studies_with_two_to_four_series_encode_unit_norm_and_deterministic() {
        let cfg = tiny_cfg();
        let (store, enc) = build(15, cfg);
        let name = random_name(15, cfg.name_dim);
        for k in [2usize, 3, 4] {
            let seqs: Vec<Array1<f64>> = (0..k)
                .map(|i| {
                    let series = random_series(400 + (10 * k + i) as u64, 2 + i, &cfg);
                    enc.vit_seq.encode_sequence(&store, &series, &name).unwrap()
                })
                .collect();
            let a = enc.vit_st.encode_study(&store, &seqs, &name).unwrap();
            let b = enc.vit_st.encode_study(&store, &seqs, &name).unwrap();
            assert_eq!(a, b, "eval determinism (k={k})");
            assert_eq!(a.len(), cfg.embed_dim);
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "unit norm (k={k})");
            StudyEmbedding::new(format!("study-{k}"), a).unwrap();
        }
    }

    #[test]
    fn empty_study_is_rejected() {
        let cfg = tiny_cfg();
        let (store, enc) = build(17, cfg);
        let name = random_name(17, cfg.name_dim);
        assert!(enc.vit_st.encode_study(&store, &[], &name).is_err());
    }

    #[test]
    fn provenance_types_reject_non_unit_vectors() {
        let v = Array1::from_vec(vec![0.5, 0.5]);
        assert!(SequenceEmbedding::new("s", 0, v.clone()).is_err());
        assert!(StudyEmbedding::new("s", v).is_err());
    }

    #[test]
    fn patient_projection_is_additive_before_normalization() {
        let cfg = tiny_cfg();
        let (store, enc) = build(19, cfg);
        let t = Tape::new(&store);
        let mut r = rng::stream(19, "hier-test", 3);
        let a = init::normal(&mut r, &[1, cfg.width], 1.0);
        let b = init::normal(&mut r, &[1, cfg.width], 1.0);
        let sum = &a + &b;
        let pa = t.value_owned(enc.patdis.raw_on_tape(&t, t.constant(a)));
        let pb = t.value_owned(enc.patdis.raw_on_tape(&t, t.constant(b)));
        let psum = t.value_owned(enc.patdis.raw_on_tape(&t, t.constant(sum)));
        let lhs = &pa + &pb;
        let diff = (&lhs - &psum).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "bias-free linear map must be additive");
    }

    #[test]
    fn patient_projection_outputs_unit_rows_deterministically() {
        let cfg = tiny_cfg();
        let (store, enc) = build(21, cfg);
        let v = random_name(21, cfg.width);
        let a = enc.patdis.project(&store, &v);
        let b = enc.patdis.project(&store, &v);
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.patdis_dim);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gradients_reach_every_trainable_component_but_not_the_tokenizer() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut r = rng::stream(23, "hier-init", 0);
        let frozen_codebook = store.add("vq.codebook", init::normal(&mut r, &[16, 8], 1.0));
        let enc = StudyEncoder::new(&mut store, &mut r, cfg).unwrap();
        let name_cfg = NameEncoderConfig {
            vocab_size: 24,
            width: 16,
            depth: 1,
            heads: 2,
            out_dim: cfg.name_dim,
        };
        let esn = SeqNameEncoder::new(&mut store, &mut r, name_cfg.clone()).unwrap();
        let estn = StudyNameEncoder::new(&mut store, &mut r, name_cfg).unwrap();
        let lm = ReportLM::new(
            &mut store,
            &mut r,
            LmConfig {
                vocab_size: 24,
                width: 16,
                depth: 1,
                heads: 2,
                context: 16,
                embed_dim: cfg.embed_dim,
            },
        )
        .unwrap();

        let t = Tape::new(&store);
        let mut regs = Vec::new();
        let mut proj_rows = Vec::new();
        for i in 0..2u64 {
            let series = random_series(500 + i, 3, &cfg);
            let name = esn.forward_ids(&t, &[4 + i as usize, 5]);
            let reg = enc.vit_seq.embedding_on_tape(&t, &series, name).unwrap();
            proj_rows.push(enc.patdis.forward_on_tape(&t, reg));
            regs.push(reg);
        }
        let study_name = estn.forward_ids(&t, &[6, 7]);
        let study = enc
            .vit_st
            .embedding_on_tape(&t, &regs, study_name)
            .unwrap();
        let report = lm.encode_ids_on_tape(&t, &[BOS, 8, 9, EOS]);
        let loss = t.add_n(&[
            t.sum_all(study),
            t.sum_all(t.concat_rows(&proj_rows)),
            t.sum_all(report),
        ]);
        let grads = t.backward(loss);

        assert!(
            grads.get(frozen_codebook).is_none(),
            "tokenizer weights stay off the tape, so their gradient is identically zero"
        );
        for prefix in ["vitseq.", "vitst.", "patdis.", "esn.", "estn.", "lm."] {
            let touched = store.ids().any(|id| {
                store.name(id).starts_with(prefix)
                    && grads
                        .get(id)
                        .is_some_and(|g| g.iter().any(|v| v.abs() > 0.0))
            });
            assert!(touched, "no gradient reached any {prefix} parameter");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn readout_is_invariant_under_any_token_permutation(
            n in 1usize..6,
            seed in 0u64..1000,
            swap_a in 0usize..6,
            swap_b in 0usize..6,
        ) {
            let cfg = tiny_cfg();
            let (store, enc) = build(25, cfg);
            let series = random_series(seed, n, &cfg);
            let name = random_name(seed, cfg.name_dim);
            let base = enc.vit_seq.encode_sequence(&store, &series, &name).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.swap(swap_a % n, swap_b % n);
            perm.rotate_left(seed as usize % n.max(1));
            let shuffled = SeriesTokens {
                latents: series.latents.select(Axis(0), &perm),
                positions: series.positions.select(Axis(0), &perm),
            };
            let out = enc.vit_seq.encode_sequence(&store, &shuffled, &name).unwrap();
            prop_assert!(max_abs_diff(&base, &out) < 1e-5);
        }
    }
}
