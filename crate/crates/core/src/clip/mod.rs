//! Contrastive alignment between study embeddings and report
//! embeddings: a symmetric softmax loss over the pairwise similarity
//! matrix with a learnable temperature, an auxiliary discrimination
//! loss that pushes series projections from the same study together,
//! and top-k retrieval evaluation in both directions.

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};

pub mod train;
pub use train::{
    prepare_study_inputs, train_clip, ClipBundle, ClipBundleConfig, ClipCurvePoint,
    ClipRunOutput, RetrievalPoint, StudyInputs,
};

/// Contrastive-stage hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClipConfig {
    /// Initial value of the learnable log-temperature; logits are scaled
    /// by exp(tau), clamped to at most 100.
    pub tau_init: f64,
    /// Fixed temperature of the patient-discrimination loss.
    pub tau_p: f64,
    /// Weight of the patient-discrimination term.
    pub lambda_patdis: f64,
    /// Studies per batch; every sampled study contributes all its series.
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Keep the report language model's weights fixed during training.
    pub freeze_language_model: bool,
    /// Checkpoint + retrieval-evaluation cadence, in steps.
    pub checkpoint_every: usize,
    /// k used for top-k retrieval evaluation.
    pub eval_k: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            tau_init: 0.0,
            tau_p: 0.1,
            lambda_patdis: 1.0,
            batch_size: 16,
            steps: 2000,
            lr: 1e-3,
            freeze_language_model: false,
            checkpoint_every: 500,
            eval_k: 5,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_p <= 0.0 {
            return Err(Error::config("tau_p must be positive"));
        }
        if self.lambda_patdis < 0.0 {
            return Err(Error::config("lambda_patdis must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "contrastive batches need at least two studies",
            ));
        }
        if self.steps == 0 || self.checkpoint_every == 0 || self.eval_k == 0 {
            return Err(Error::config(
                "steps, checkpoint_every and eval_k must be positive",
            ));
        }
        Ok(())
    }
}

/// Per-step loss components; `total = loss_clip + lambda * loss_patdis`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub loss_clip: f64,
    pub loss_patdis: f64,
    pub total: f64,
}

fn check_pairwise(n: usize, m: usize, d_s: usize, d_r: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::degenerate("contrastive loss over an empty batch"));
    }
    if n != m {
        return Err(Error::shape(format!(
            "{n} study rows but {m} report rows"
        )));
    }
    if d_s != d_r {
        return Err(Error::shape(format!(
            "study width {d_s} does not match report width {d_r}"
        )));
    }
    Ok(())
}

/// Symmetric contrastive loss between matched row sets. `tau` is the
/// learnable log-temperature (0-d var); logits are `S·Rᵀ·exp(tau)` with
/// the scale clamped to 100, and the loss averages softmax
/// cross-entropy down rows and down columns with the diagonal as the
/// target.
pub fn clip_loss_on_tape(t: &Tape, s: Var, r: Var, tau: Var) -> Result<Var> {
    let ss = t.shape(s);
    let rs = t.shape(r);
    check_pairwise(ss[0], rs[0], ss[1], rs[1])?;
    let exp_tau = t.clamp_max(t.exp(tau), 100.0);
    let logits = t.scale_by(t.matmul(s, t.transpose(r)), exp_tau);
    let targets: Vec<usize> = (0..ss[0]).collect();
    let fwd = t.cross_entropy_rows(logits, &targets);
    let bwd = t.cross_entropy_rows(t.transpose(logits), &targets);
    Ok(t.scale(t.add(fwd, bwd), 0.5))
}

/// Eval-mode [`clip_loss_on_tape`] over plain matrices.
pub fn clip_loss(s: &Array2<f64>, r: &Array2<f64>, tau: f64) -> Result<f64> {
    let store = ParamStore::new();
    let t = Tape::new(&store);
    let sv = t.constant(s.clone().into_dyn());
    let rv = t.constant(r.clone().into_dyn());
    let tv = t.constant(ArrayD::from_elem(IxDyn(&[]), tau));
    Ok(t.scalar(clip_loss_on_tape(&t, sv, rv, tv)?))
}

/// Pulls series projections of one study onto each other: row-softmax of
/// the scaled similarity matrix (diagonal overwritten with −10), then
/// per row the probability mass landing on same-study rows — the
/// aggregate score — is log-scored and scaled by that row's group size.
///
/// `seq_map[i]` names the study of row `i`; the mask includes the
/// diagonal, so a row with no partner scores its own −10 logit's mass.
pub fn patient_discrimination_loss_on_tape(
    t: &Tape,
    rows: Var,
    seq_map: &[usize],
    tau_p: f64,
) -> Result<Var> {
    if tau_p <= 0.0 {
        return Err(Error::config("tau_p must be positive"));
    }
    let shape = t.shape(rows);
    let n = shape[0];
    if n < 2 {
        return Err(Error::degenerate(
            "patient discrimination needs at least two series",
        ));
    }
    if seq_map.len() != n {
        return Err(Error::shape(format!(
            "{n} projection rows but {} study assignments",
            seq_map.len()
        )));
    }
    let sims = t.scale(t.matmul(rows, t.transpose(rows)), 1.0 / tau_p);
    let mut keep_offdiag = Array2::<f64>::ones((n, n));
    let mut diag_fill = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        keep_offdiag[[i, i]] = 0.0;
        diag_fill[[i, i]] = -10.0;
    }
    let logits = t.add(
        t.mul(sims, t.constant(keep_offdiag.into_dyn())),
        t.constant(diag_fill.into_dyn()),
    );
    let q = t.softmax_rows(logits);
    let mut mask = Array2::<f64>::zeros((n, n));
    let mut inv_group = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut count = 0.0;
        for j in 0..n {
            if seq_map[i] == seq_map[j] {
                mask[[i, j]] = 1.0;
                count += 1.0;
            }
        }
        inv_group[i] = -1.0 / count;
    }
    let agg = t.sum_axis1(t.mul(q, t.constant(mask.into_dyn())));
    Ok(t.sum_all(t.mul(t.ln(agg), t.constant(inv_group.into_dyn()))))
}

/// Eval-mode [`patient_discrimination_loss_on_tape`].
pub fn patient_discrimination_loss(
    rows: &Array2<f64>,
    seq_map: &[usize],
    tau_p: f64,
) -> Result<f64> {
    let store = ParamStore::new();
    let t = Tape::new(&store);
    let rv = t.constant(rows.clone().into_dyn());
    Ok(t.scalar(patient_discrimination_loss_on_tape(
        &t, rv, seq_map, tau_p,
    )?))
}

/// Fraction of queries whose true partner ranks within the k nearest by
/// cosine, in each direction.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RetrievalScores {
    pub image_to_text: f64,
    pub text_to_image: f64,
}

fn normalized_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

fn topk_hit_rate(sims: &Array2<f64>, k: usize) -> f64 {
    let n = sims.nrows();
    let mut hits = 0usize;
    for i in 0..n {
        let truth = sims[[i, i]];
        let beaten_by = sims.row(i).iter().filter(|&&s| s > truth).count();
        if beaten_by < k {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Top-k retrieval accuracy both ways between matched embedding sets.
/// Row `i` of `s` and row `i` of `r` are partners.
pub fn evaluate_retrieval(
    s: &Array2<f64>,
    r: &Array2<f64>,
    k: usize,
) -> Result<RetrievalScores> {
    check_pairwise(s.nrows(), r.nrows(), s.ncols(), r.ncols())?;
    let n = s.nrows();
    if k == 0 || k > n {
        return Err(Error::config(format!(
            "k = {k} outside the candidate count {n}"
        )));
    }
    let sims = normalized_rows(s).dot(&normalized_rows(r).t());
    let image_to_text = topk_hit_rate(&sims, k);
    let text_to_image = topk_hit_rate(&sims.t().to_owned(), k);
    Ok(RetrievalScores {
        image_to_text,
        text_to_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init;
    use crate::rng;

    fn unit_rows(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut r = rng::stream(seed, "clip-test", 0);
        let mut m = init::normal(&mut r, &[n, d], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for mut row in m.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        m
    }

    /// Scalar-loop contrastive loss: softmax cross-entropy down rows and
    /// columns of S·Rᵀ·scale, diagonal targets.
    fn clip_oracle(s: &Array2<f64>, r: &Array2<f64>, tau: f64) -> f64 {
        let n = s.nrows();
        let scale = tau.exp().min(100.0);
        let mut logits = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for c in 0..s.ncols() {
                    dot += s[[i, c]] * r[[j, c]];
                }
                logits[i][j] = dot * scale;
            }
        }
        let ce = |rows: &dyn Fn(usize, usize) -> f64| {
            let mut total = 0.0;
            for i in 0..n {
                let max = (0..n).map(|j| rows(i, j)).fold(f64::MIN, f64::max);
                let z: f64 = (0..n).map(|j| (rows(i, j) - max).exp()).sum();
                total += -(rows(i, i) - max - z.ln());
            }
            total / n as f64
        };
        let fwd = ce(&|i, j| logits[i][j]);
        let bwd = ce(&|i, j| logits[j][i]);
        0.5 * (fwd + bwd)
    }

    /// Scalar-loop discrimination loss following the documented recipe
    /// step by step.
    fn patdis_oracle(rows: &Array2<f64>, seq_map: &[usize], tau_p: f64) -> f64 {
        let n = rows.nrows();
        let mut logits = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    logits[i][j] = -10.0;
                } else {
                    let mut dot = 0.0;
                    for c in 0..rows.ncols() {
                        dot += rows[[i, c]] * rows[[j, c]];
                    }
                    logits[i][j] = dot / tau_p;
                }
            }
        }
        let mut loss = 0.0;
        for i in 0..n {
            let max = logits[i].iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits[i].iter().map(|&l| (l - max).exp()).sum();
            let mut agg = 0.0;
            let mut group = 0.0;
            for j in 0..n {
                if seq_map[i] == seq_map[j] {
                    agg += (logits[i][j] - max).exp() / z;
                    group += 1.0;
                }
            }
            loss += -agg.ln() / group;
        }
        loss
    }

    #[test]
    fn matched_identity_pair_hits_the_closed_form() {
        let s = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let loss = clip_loss(&s, &s, 0.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!(
            (loss - expected).abs() < 1e-6,
            "loss {loss} vs closed form {expected}"
        );
    }

    #[test]
    fn relabeling_both_sides_preserves_the_loss() {
        let s = unit_rows(1, 5, 8);
        let r = unit_rows(2, 5, 8);
        let base = clip_loss(&s, &r, 0.3).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let sp = s.select(ndarray::Axis(0), &perm);
        let rp = r.select(ndarray::Axis(0), &perm);
        let permuted = clip_loss(&sp, &rp, 0.3).unwrap();
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn swapping_the_two_sides_preserves_the_loss() {
        let s = unit_rows(3, 6, 8);
        let r = unit_rows(4, 6, 8);
        let a = clip_loss(&s, &r, 0.1).unwrap();
        let b = clip_loss(&r, &s, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_stays_positive_and_matches_oracle() {
        for seed in 0..20u64 {
            let n = 2 + (seed as usize % 5);
            let s = unit_rows(100 + seed, n, 6);
            let r = unit_rows(200 + seed, n, 6);
            let tau = (seed as f64) / 7.0;
            let loss = clip_loss(&s, &r, tau).unwrap();
            assert!(loss > 0.0, "finite inputs keep the loss positive");
            let oracle = clip_oracle(&s, &r, tau);
            assert!(
                (loss - oracle).abs() < 1e-9,
                "seed {seed}: {loss} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn temperature_scale_is_clamped() {
        let s = unit_rows(5, 3, 4);
        let r = unit_rows(6, 3, 4);
        // tau large enough that exp(tau) would be astronomically over
        // the clamp; the loss must match the oracle evaluated at the
        // clamped scale, i.e. stay finite.
        let loss = clip_loss(&s, &r, 50.0).unwrap();
        let oracle = clip_oracle(&s, &r, 50.0);
        assert!(loss.is_finite());
        assert!((loss - oracle).abs() < 1e-9);
    }

    #[test]
    fn batch_and_width_mismatches_are_rejected() {
        let s = unit_rows(7, 4, 8);
        let r = unit_rows(8, 3, 8);
        assert!(clip_loss(&s, &r, 0.0).is_err());
        let r = unit_rows(9, 4, 6);
        assert!(clip_loss(&s, &r, 0.0).is_err());
        let empty = Array2::<f64>::zeros((0, 8));
        assert!(clip_loss(&empty, &empty, 0.0).is_err());
    }

    #[test]
    fn one_study_batch_scores_zero_discrimination() {
        let rows = unit_rows(10, 5, 8);
        let loss = patient_discrimination_loss(&rows, &[2, 2, 2, 2, 2], 0.1).unwrap();
        assert!(
            loss.abs() < 1e-12,
            "full-mask rows aggregate the whole softmax: {loss}"
        );
    }

    #[test]
    fn two_orthogonal_singletons_hit_the_closed_form() {
        let rows = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let loss = patient_discrimination_loss(&rows, &[0, 1], 1.0).unwrap();
        // Each row's aggregate score is e^-10 / (e^-10 + 1), so the loss
        // is 2 * (10 + ln(1 + e^-10)).
        let expected = 2.0 * (10.0 + (-10.0f64).exp().ln_1p());
        assert!(
            (loss - expected).abs() < 1e-9,
            "loss {loss} vs closed form {expected}"
        );
        assert!((loss - 20.0001).abs() < 1e-3);
    }

    #[test]
    fn discrimination_loss_matches_scalar_oracle_on_random_batches() {
        let mut checked = 0;
        for seed in 0..200u64 {
            let mut r = rng::stream(300 + seed, "clip-test", 1);
            use rand::Rng as _;
            let n = 2 + (r.random_range(0..7usize));
            let rows = unit_rows(400 + seed, n, 5);
            let seq_map: Vec<usize> = (0..n).map(|_| r.random_range(0..3usize)).collect();
            let loss = patient_discrimination_loss(&rows, &seq_map, 0.1).unwrap();
            let oracle = patdis_oracle(&rows, &seq_map, 0.1);
            assert!(
                (loss - oracle).abs() < 1e-6,
                "seed {seed}: {loss} vs {oracle}"
            );
            assert!(loss >= 0.0, "aggregate scores are softmax mass, at most 1");
            checked += 1;
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn degenerate_discrimination_inputs_are_rejected() {
        let rows = unit_rows(11, 1, 4);
        assert!(patient_discrimination_loss(&rows, &[0], 0.1).is_err());
        let rows = unit_rows(12, 3, 4);
        assert!(patient_discrimination_loss(&rows, &[0, 1], 0.1).is_err());
        assert!(patient_discrimination_loss(&rows, &[0, 1, 2], 0.0).is_err());
    }

    fn loss_grads_match_finite_differences(
        loss_of: &dyn Fn(&Array2<f64>) -> f64,
        grad_of: &dyn Fn(&Array2<f64>) -> Array2<f64>,
        at: &Array2<f64>,
    ) {
        let analytic = grad_of(at);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..at.nrows() {
            for j in 0..at.ncols() {
                let mut hi = at.clone();
                hi[[i, j]] += h;
                let mut lo = at.clone();
                lo[[i, j]] -= h;
                let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
                worst = worst.max((fd - analytic[[i, j]]).abs());
                scale = scale.max(fd.abs()).max(analytic[[i, j]].abs());
            }
        }
        assert!(
            worst / scale.max(1e-12) < 1e-4,
            "gradient mismatch: max abs err {worst}, scale {scale}"
        );
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let s0 = unit_rows(13, 3, 4);
        let r0 = unit_rows(14, 3, 4);
        let store = {
            let mut st = ParamStore::new();
            st.add("s", s0.clone().into_dyn());
            st
        };
        let sid = store.lookup("s").unwrap();
        let grad_of = |at: &Array2<f64>| {
            let mut st = store.clone();
            *st.value_mut(sid) = at.clone().into_dyn();
            let t = Tape::new(&st);
            let rv = t.constant(r0.clone().into_dyn());
            let tv = t.constant(ArrayD::from_elem(IxDyn(&[]), 0.2));
            let loss = clip_loss_on_tape(&t, t.param(sid), rv, tv).unwrap();
            let g = t.backward(loss);
            g.get(sid)
                .unwrap()
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        let loss_of = |at: &Array2<f64>| clip_loss(at, &r0, 0.2).unwrap();
        loss_grads_match_finite_differences(&loss_of, &grad_of, &s0);
    }

    #[test]
    fn discrimination_gradient_matches_finite_differences() {
        let e0 = unit_rows(15, 3, 4);
        let seq_map = vec![0usize, 0, 1];
        let store = {
            let mut st = ParamStore::new();
            st.add("e", e0.clone().into_dyn());
            st
        };
        let eid = store.lookup("e").unwrap();
        let grad_of = |at: &Array2<f64>| {
            let mut st = store.clone();
            *st.value_mut(eid) = at.clone().into_dyn();
            let t = Tape::new(&st);
            let loss =
                patient_discrimination_loss_on_tape(&t, t.param(eid), &seq_map, 0.5).unwrap();
            let g = t.backward(loss);
            g.get(eid)
                .unwrap()
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        let loss_of = |at: &Array2<f64>| patient_discrimination_loss(at, &seq_map, 0.5).unwrap();
        loss_grads_match_finite_differences(&loss_of, &grad_of, &e0);
    }

    #[test]
    fn retrieval_is_perfect_when_both_sides_match() {
        let s = unit_rows(16, 7, 8);
        let scores = evaluate_retrieval(&s, &s, 1).unwrap();
        assert_eq!(scores.image_to_text, 1.0);
        assert_eq!(scores.text_to_image, 1.0);
    }

    #[test]
    fn retrieval_rejects_out_of_range_k() {
        let s = unit_rows(17, 4, 8);
        assert!(evaluate_retrieval(&s, &s, 5).is_err());
        assert!(evaluate_retrieval(&s, &s, 0).is_err());
    }

    #[test]
    fn random_embeddings_retrieve_at_chance_level() {
        let mut total = 0.0;
        let seeds = 10;
        for seed in 0..seeds {
            let s = unit_rows(500 + seed, 100, 16);
            let r = unit_rows(600 + seed, 100, 16);
            let scores = evaluate_retrieval(&s, &r, 5).unwrap();
            total += (scores.image_to_text + scores.text_to_image) / 2.0;
        }
        let mean = total / seeds as f64;
        assert!(
            (mean - 0.05).abs() < 0.03,
            "unrelated embeddings should land near k/N = 0.05, got {mean}"
        );
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = ClipConfig::default();
        ok.validate().unwrap();
        assert!(ClipConfig {
            tau_p: 0.0,
            ..ClipConfig::default()
        }
        .validate()
        .is_err());
        assert!(ClipConfig {
            lambda_patdis: -0.1,
            ..ClipConfig::default()
        }
        .validate()
        .is_err());
        assert!(ClipConfig {
            batch_size: 1,
            ..ClipConfig::default()
        }
        .validate()
        .is_err());
    }
}
