//! VQ-VAE training: permutation-augmented batches, loss-based codebook
//! updates with dead-code reseeding, collapse warnings, and CSV/JSONL
//! run artifacts.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cohort::types::{Split, StudyRecord};
use crate::error::{Error, Result};
use crate::log::{write_csv, JsonlLog};
use crate::nn::{Adam, AdamConfig, Tape};
use crate::rng;
use crate::tokenizer::{
    bucket_shapes, filter_background, order_between, compose_orders, patch_volume,
    BackgroundFilter, PatchSpec,
};
use crate::vq::{quantize_batch, VqArch, VqModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqTrainConfig {
    pub arch: VqArch,
    /// Train with random axis permutations (the orientation-invariance
    /// recipe); when off, tokens are presented in native shape only.
    pub permutations: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub eval_token_count: usize,
    /// Reseed dead codes to fresh encoder outputs at this cadence.
    pub reseed_every: usize,
    /// Steps of sustained ≥50% dead codes before a collapse warning.
    pub collapse_window: usize,
    pub background_threshold: f64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            arch: VqArch::default(),
            permutations: true,
            steps: 20_000,
            batch_size: 256,
            lr: 3e-4,
            eval_every: 500,
            eval_token_count: 256,
            reseed_every: 2_000,
            collapse_window: 1_000,
            background_threshold: 0.05,
        }
    }
}

impl VqTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        if self.eval_every == 0 || self.reseed_every == 0 || self.collapse_window == 0 {
            return Err(Error::config("cadence settings must be positive"));
        }
        Ok(())
    }

    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            patch_dims: self.arch.patch_dims,
            ..Default::default()
        }
    }

    pub fn background_filter(&self) -> BackgroundFilter {
        BackgroundFilter {
            threshold: self.background_threshold,
            ..Default::default()
        }
    }
}

/// Flat store of foreground token voxels grouped by native shape.
pub struct TokenPool {
    pub entries: Vec<Array3<f32>>,
    pub shapes: Vec<[usize; 3]>,
    pub by_bucket: Vec<Vec<usize>>,
}

impl TokenPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn bucket_of(&self, entry: usize) -> usize {
        let shape = self.entries[entry].shape();
        self.shapes
            .iter()
            .position(|s| s == shape)
            .expect("pool entry shape outside bucket set")
    }
}

/// Tokenize every sequence of the given split into a training pool.
pub fn build_token_pool(
    records: &[StudyRecord],
    split: Split,
    patch: &PatchSpec,
    filter: &BackgroundFilter,
) -> Result<TokenPool> {
    let shapes = bucket_shapes(patch.patch_dims);
    let mut entries = Vec::new();
    let mut by_bucket = vec![Vec::new(); shapes.len()];
    for rec in records.iter().filter(|r| r.split == split) {
        for (_, vol) in &rec.sequences {
            let grid = patch_volume(vol, patch)?;
            let kept = filter_background(&grid, filter);
            for tok in kept.tokens {
                let bucket = shapes
                    .iter()
                    .position(|&s| s == tok.shape_bucket)
                    .ok_or_else(|| Error::shape("token shape outside bucket set"))?;
                by_bucket[bucket].push(entries.len());
                entries.push(tok.voxels.mapv(|v| v as f32));
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::degenerate("token pool is empty"));
    }
    Ok(TokenPool {
        entries,
        shapes,
        by_bucket,
    })
}

/// Build a pool directly from loose voxel arrays (toy/test corpora).
pub fn pool_from_arrays(arrays: Vec<Array3<f32>>, patch_dims: [usize; 3]) -> Result<TokenPool> {
    let shapes = bucket_shapes(patch_dims);
    let mut by_bucket = vec![Vec::new(); shapes.len()];
    for (i, a) in arrays.iter().enumerate() {
        let shape = [a.shape()[0], a.shape()[1], a.shape()[2]];
        let bucket = shapes
            .iter()
            .position(|&s| s == shape)
            .ok_or_else(|| Error::shape("array shape outside bucket set"))?;
        by_bucket[bucket].push(i);
    }
    if arrays.is_empty() {
        return Err(Error::degenerate("token pool is empty"));
    }
    Ok(TokenPool {
        entries: arrays,
        shapes,
        by_bucket,
    })
}

fn assemble_batch(
    pool: &TokenPool,
    picks: &[(usize, [usize; 3])],
    shape: [usize; 3],
) -> ArrayD<f64> {
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[picks.len(), 1, shape[0], shape[1], shape[2]]));
    for (slot, (entry, order)) in picks.iter().enumerate() {
        let view = pool.entries[*entry]
            .view()
            .permuted_axes([order[0], order[1], order[2]]);
        let mut dst = x.index_axis_mut(ndarray::Axis(0), slot);
        let mut dst = dst.index_axis_mut(ndarray::Axis(0), 0);
        for (d, s) in dst.iter_mut().zip(view.iter()) {
            *d = *s as f64;
        }
    }
    x
}

/// Mean reconstruction and quantization losses over the given pool
/// entries, presented in native shape through the full encode →
/// quantize → decode path.
pub fn eval_losses(
    model: &VqModel,
    pool: &TokenPool,
    indices: &[usize],
    chunk: usize,
) -> Result<(f64, f64)> {
    let cb = model.codebook();
    let mut recon_sum = 0.0;
    let mut quant_sum = 0.0;
    let mut n = 0usize;
    let mut grouped: Vec<Vec<usize>> = vec![Vec::new(); pool.shapes.len()];
    for &i in indices {
        grouped[pool.bucket_of(i)].push(i);
    }
    for (bucket, group) in grouped.iter().enumerate() {
        let shape = pool.shapes[bucket];
        for part in group.chunks(chunk.max(1)) {
            let picks: Vec<(usize, [usize; 3])> =
                part.iter().map(|&i| (i, [0usize, 1, 2])).collect();
            let x = assemble_batch(pool, &picks, shape);
            let t = Tape::new(&model.store);
            let xv = t.constant(x.clone());
            let z = model.encode_on_tape(&t, xv);
            let zv = t
                .value_owned(z)
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::shape(e.to_string()))?;
            let (_, e) = quantize_batch(&zv.view(), &cb.vectors.view());
            let ev = t.constant(e.clone().into_dyn());
            let recon = model.decode_on_tape(&t, ev, shape);
            let diff = t.sub(recon, xv);
            let mse = t.scalar(t.mean_all(t.square(diff)));
            let q = (&zv - &e).mapv(|d| d * d).mean().unwrap_or(0.0);
            recon_sum += mse * part.len() as f64;
            quant_sum += q * part.len() as f64;
            n += part.len();
        }
    }
    if n == 0 {
        return Err(Error::degenerate("no evaluation tokens"));
    }
    Ok((recon_sum / n as f64, quant_sum / n as f64))
}

#[derive(Debug, Clone, Serialize)]
pub struct VqCurvePoint {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub quant: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VqValPoint {
    pub step: usize,
    pub recon: f64,
    pub quant: f64,
}

pub struct VqRunOutput {
    pub model: VqModel,
    pub train_curve: Vec<VqCurvePoint>,
    pub val_curve: Vec<VqValPoint>,
    pub events: Vec<serde_json::Value>,
}

impl VqRunOutput {
    pub fn final_val(&self) -> Option<&VqValPoint> {
        self.val_curve.last()
    }
}

/// Train the autoencoder. Deterministic given (config, seed): every
/// batch, permutation, eval, and reseed decision is drawn from streams
/// keyed by step index.
pub fn train_vqvae(
    train: &TokenPool,
    val: &TokenPool,
    cfg: &VqTrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<VqRunOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::degenerate("empty training pool"));
    }
    let mut log = match out_dir {
        Some(dir) => JsonlLog::to_file(&dir.join("train_log.jsonl"))?,
        None => JsonlLog::in_memory(),
    };
    let mut init_rng = rng::stream(seed, "vq-init", 0);
    let mut model = VqModel::new(cfg.arch.clone(), &mut init_rng)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        model.store.len(),
    );

    init_codebook_from_data(&mut model, train, seed)?;

    // fixed validation subset
    let mut eval_rng = rng::stream(seed, "vq-eval", 0);
    let eval_count = cfg.eval_token_count.min(val.len());
    let mut eval_indices: Vec<usize> = (0..val.len()).collect();
    eval_indices.shuffle(&mut eval_rng);
    eval_indices.truncate(eval_count.max(1));

    let mut train_curve = Vec::with_capacity(cfg.steps);
    let mut val_curve = Vec::new();
    let mut events = Vec::new();
    let mut collapse_run = 0usize;

    for step in 1..=cfg.steps {
        let mut r = rng::stream(seed, "vq-step", step as u64);
        let (shape, picks) = draw_batch(train, cfg, &mut r);
        let x = assemble_batch(train, &picks, shape);

        let (total, recon, quant, grads, batch_z) = {
            let t = Tape::new(&model.store);
            let xv = t.constant(x);
            let z = model.encode_on_tape(&t, xv);
            let zv = t
                .value_owned(z)
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::shape(e.to_string()))?;
            let cb_vals = model
                .store
                .value(model.codebook_id)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::shape(e.to_string()))?;
            let (idx, e) = quantize_batch(&zv.view(), &cb_vals.view());
            for &i in &idx {
                model.usage_counts[i] += 1;
            }
            let st = t.straight_through(z, e.clone().into_dyn());
            let recon = model.decode_on_tape(&t, st, shape);
            let l_rec = t.mean_all(t.square(t.sub(recon, xv)));
            let cb_var = t.param(model.codebook_id);
            let picked = t.gather_rows(cb_var, &idx);
            let l_code = t.mean_all(t.square(t.sub(picked, t.constant(zv.clone().into_dyn()))));
            let l_commit = t.mean_all(t.square(t.sub(z, t.constant(e.clone().into_dyn()))));
            let l_quant = t.add(l_code, t.scale(l_commit, cfg.arch.commitment_beta));
            let loss = t.add(l_rec, l_quant);
            let total = t.scalar(loss);
            if !total.is_finite() {
                return Err(Error::training(format!("non-finite loss at step {step}")));
            }
            let grads = t.backward(loss);
            (total, t.scalar(l_rec), t.scalar(l_quant), grads, zv)
        };
        adam.step(&mut model.store, &grads);
        train_curve.push(VqCurvePoint {
            step,
            total,
            recon,
            quant,
        });

        // collapse monitoring on since-reset usage
        let dead = model.usage_counts.iter().filter(|&&c| c == 0).count();
        if dead * 2 >= model.usage_counts.len() {
            collapse_run += 1;
            if collapse_run == cfg.collapse_window {
                let ev = serde_json::json!({
                    "event": "collapse_warning",
                    "step": step,
                    "dead_fraction": dead as f64 / model.usage_counts.len() as f64,
                });
                log.log(ev.clone())?;
                events.push(ev);
                collapse_run = 0;
            }
        } else {
            collapse_run = 0;
        }

        if step % cfg.reseed_every == 0 {
            let reseeded = reseed_dead_codes(&mut model, &batch_z, seed, step as u64);
            if reseeded > 0 {
                let ev = serde_json::json!({
                    "event": "dead_code_reseed",
                    "step": step,
                    "reseeded": reseeded,
                });
                log.log(ev.clone())?;
                events.push(ev);
            }
            model.reset_usage();
        }

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (vr, vq) = eval_losses(&model, val, &eval_indices, 64)?;
            val_curve.push(VqValPoint {
                step,
                recon: vr,
                quant: vq,
            });
            log.log(serde_json::json!({
                "event": "eval",
                "step": step,
                "val_recon": vr,
                "val_quant": vq,
            }))?;
        }

        if step % 100 == 0 || step == 1 {
            log.log(serde_json::json!({
                "event": "train",
                "step": step,
                "total": total,
                "recon": recon,
                "quant": quant,
            }))?;
        }
    }
    log.flush()?;

    if let Some(dir) = out_dir {
        save_run(dir, cfg, seed, &model, &train_curve, &val_curve)?;
    }
    Ok(VqRunOutput {
        model,
        train_curve,
        val_curve,
        events,
    })
}

fn draw_batch(
    pool: &TokenPool,
    cfg: &VqTrainConfig,
    r: &mut rng::Rng,
) -> ([usize; 3], Vec<(usize, [usize; 3])>) {
    let b = cfg.batch_size;
    if cfg.permutations {
        let target = pool.shapes[r.random_range(0..pool.shapes.len())];
        let mut axis_order = [0usize, 1, 2];
        axis_order.shuffle(r);
        let final_shape = [
            target[axis_order[0]],
            target[axis_order[1]],
            target[axis_order[2]],
        ];
        let picks = (0..b)
            .map(|_| {
                let entry = r.random_range(0..pool.len());
                let native = [
                    pool.entries[entry].shape()[0],
                    pool.entries[entry].shape()[1],
                    pool.entries[entry].shape()[2],
                ];
                let to_target =
                    order_between(native, target).expect("bucket shapes are permutations");
                (entry, compose_orders(to_target, axis_order))
            })
            .collect();
        (final_shape, picks)
    } else {
        // native-only: pick a bucket with probability ∝ its size
        let total = pool.len();
        let pivot = r.random_range(0..total);
        let mut acc = 0usize;
        let mut bucket = 0usize;
        for (bi, members) in pool.by_bucket.iter().enumerate() {
            acc += members.len();
            if pivot < acc {
                bucket = bi;
                break;
            }
        }
        let members = &pool.by_bucket[bucket];
        let picks = (0..b)
            .map(|_| (members[r.random_range(0..members.len())], [0usize, 1, 2]))
            .collect();
        (pool.shapes[bucket], picks)
    }
}

/// Initialize codebook rows from encoder outputs on real tokens, so
/// codes start on the data manifold for every codebook size.
fn init_codebook_from_data(model: &mut VqModel, pool: &TokenPool, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, "vq-cbinit", 0);
    let k = model.arch.codebook_size;
    let picks: Vec<usize> = (0..k).map(|_| r.random_range(0..pool.len())).collect();
    let mut grouped: Vec<Vec<(usize, usize)>> = vec![Vec::new(); pool.shapes.len()];
    for (row, &entry) in picks.iter().enumerate() {
        grouped[pool.bucket_of(entry)].push((row, entry));
    }
    let mut init = Array2::<f64>::zeros((k, model.arch.code_dim));
    for (bucket, group) in grouped.iter().enumerate() {
        let shape = pool.shapes[bucket];
        for part in group.chunks(64) {
            let picks: Vec<(usize, [usize; 3])> =
                part.iter().map(|&(_, e)| (e, [0usize, 1, 2])).collect();
            let x = assemble_batch(pool, &picks, shape);
            let t = Tape::new(&model.store);
            let z = model.encode_on_tape(&t, t.constant(x));
            let zv = t
                .value_owned(z)
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::shape(e.to_string()))?;
            for (local, &(row, _)) in part.iter().enumerate() {
                for d in 0..model.arch.code_dim {
                    init[[row, d]] = zv[[local, d]] + 0.01 * normal_draw(&mut r);
                }
            }
        }
    }
    model
        .store
        .value_mut(model.codebook_id)
        .assign(&init.into_dyn());
    Ok(())
}

fn normal_draw(r: &mut rng::Rng) -> f64 {
    let u1: f64 = r.random::<f64>().max(1e-12);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Move codes unused since the last reset onto current encoder outputs.
fn reseed_dead_codes(model: &mut VqModel, batch_z: &Array2<f64>, seed: u64, step: u64) -> usize {
    let mut r = rng::stream(seed, "vq-reseed", step);
    let dead: Vec<usize> = model
        .usage_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect();
    if dead.is_empty() || batch_z.nrows() == 0 {
        return 0;
    }
    let mut cb = model
        .store
        .value(model.codebook_id)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("codebook is 2-D");
    for &k in &dead {
        let src = r.random_range(0..batch_z.nrows());
        for d in 0..model.arch.code_dim {
            cb[[k, d]] = batch_z[[src, d]] + 0.01 * normal_draw(&mut r);
        }
    }
    model
        .store
        .value_mut(model.codebook_id)
        .assign(&cb.into_dyn());
    dead.len()
}

fn save_run(
    dir: &Path,
    cfg: &VqTrainConfig,
    seed: u64,
    model: &VqModel,
    train_curve: &[VqCurvePoint],
    val_curve: &[VqValPoint],
) -> Result<()> {
    let train_rows: Vec<Vec<f64>> = train_curve
        .iter()
        .map(|p| vec![p.step as f64, p.total, p.recon, p.quant])
        .collect();
    write_csv(
        &dir.join("train_curve.csv"),
        &["step", "total", "recon", "quant"],
        &train_rows,
    )?;
    let val_rows: Vec<Vec<f64>> = val_curve
        .iter()
        .map(|p| vec![p.step as f64, p.recon, p.quant])
        .collect();
    write_csv(
        &dir.join("val_curve.csv"),
        &["step", "recon", "quant"],
        &val_rows,
    )?;
    crate::ckpt::save(
        dir,
        "vq",
        seed,
        train_curve.last().map(|p| p.step).unwrap_or(0),
        serde_json::to_value(cfg)?,
        serde_json::json!({ "usage_counts": model.usage_counts }),
        &model.store,
    )
}

/// Rebuild a trained model from a checkpoint directory.
pub fn load_vq(dir: &Path) -> Result<(VqModel, VqTrainConfig, u64)> {
    let manifest = crate::ckpt::read_manifest(dir, "vq")?;
    let cfg: VqTrainConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::checkpoint(format!("vq config parse: {e}")))?;
    let mut init_rng = rng::stream(manifest.seed, "vq-init", 0);
    let mut model = VqModel::new(cfg.arch.clone(), &mut init_rng)?;
    crate::ckpt::load_into(dir, &manifest, &mut model.store)?;
    if let Some(usage) = manifest.extra.get("usage_counts") {
        if let Ok(counts) = serde_json::from_value::<Vec<u64>>(usage.clone()) {
            if counts.len() == model.usage_counts.len() {
                model.usage_counts = counts;
            }
        }
    }
    Ok((model, cfg, manifest.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy_arch() -> VqArch {
        VqArch {
            patch_dims: [8, 8, 4],
            code_dim: 8,
            codebook_size: 64,
            enc_channels: [4, 6],
            dec_channels: [6, 4, 4],
            ..Default::default()
        }
    }

    fn smooth_tokens(n: usize, shape: [usize; 3], seed: u64) -> Vec<Array3<f32>> {
        let mut r = rng::stream(seed, "toy-tokens", 0);
        (0..n)
            .map(|_| {
                let a: f64 = r.random::<f64>() * 0.4 / shape[0] as f64;
                let b: f64 = r.random::<f64>() * 0.4 / shape[1] as f64;
                let c: f64 = r.random::<f64>() * 0.4 / shape[2] as f64;
                let d: f64 = 0.2 + 0.4 * r.random::<f64>();
                let mut arr = Array3::<f32>::zeros((shape[0], shape[1], shape[2]));
                for ((i, j, k), v) in arr.indexed_iter_mut() {
                    *v = (a * i as f64 + b * j as f64 + c * k as f64 + d) as f32;
                }
                arr
            })
            .collect()
    }

    fn toy_cfg() -> VqTrainConfig {
        VqTrainConfig {
            arch: toy_arch(),
            permutations: true,
            steps: 60,
            batch_size: 16,
            lr: 3e-3,
            eval_every: 30,
            eval_token_count: 16,
            reseed_every: 25,
            collapse_window: 50,
            ..Default::default()
        }
    }

    #[test]
    fn ten_step_training_is_reproducible() {
        let tokens = smooth_tokens(40, [8, 8, 4], 1);
        let pool = pool_from_arrays(tokens.clone(), [8, 8, 4]).unwrap();
        let val = pool_from_arrays(tokens, [8, 8, 4]).unwrap();
        let cfg = VqTrainConfig {
            steps: 10,
            eval_every: 5,
            ..toy_cfg()
        };
        let a = train_vqvae(&pool, &val, &cfg, 77, None).unwrap();
        let b = train_vqvae(&pool, &val, &cfg, 77, None).unwrap();
        assert_eq!(a.train_curve.len(), 10);
        for (x, y) in a.train_curve.iter().zip(&b.train_curve) {
            assert!((x.total - y.total).abs() < 1e-6);
            assert!((x.recon - y.recon).abs() < 1e-6);
            assert!((x.quant - y.quant).abs() < 1e-6);
        }
        for (x, y) in a.val_curve.iter().zip(&b.val_curve) {
            assert!((x.recon - y.recon).abs() < 1e-6);
        }
    }

    #[test]
    fn overfits_fifty_tokens() {
        let tokens = smooth_tokens(50, [8, 8, 4], 2);
        let pool = pool_from_arrays(tokens.clone(), [8, 8, 4]).unwrap();
        let val = pool_from_arrays(tokens, [8, 8, 4]).unwrap();
        let cfg = VqTrainConfig {
            steps: 700,
            batch_size: 25,
            lr: 4e-3,
            eval_every: 700,
            reseed_every: 100,
            ..toy_cfg()
        };
        let out = train_vqvae(&pool, &val, &cfg, 3, None).unwrap();
        let first = out.train_curve.first().unwrap().total;
        let last = out.train_curve.last().unwrap().total;
        assert!(
            last < 0.1 * first,
            "final loss {last} not under 10% of initial {first}"
        );
        let indices: Vec<usize> = (0..50).collect();
        let (mse, _) = eval_losses(&out.model, &pool, &indices, 25).unwrap();
        assert!(mse < 0.01, "overfit reconstruction MSE {mse}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let tokens = smooth_tokens(30, [8, 8, 4], 4);
        let pool = pool_from_arrays(tokens.clone(), [8, 8, 4]).unwrap();
        let val = pool_from_arrays(tokens, [8, 8, 4]).unwrap();
        let cfg = VqTrainConfig {
            steps: 12,
            eval_every: 6,
            ..toy_cfg()
        };
        let tmp = tempfile::tempdir().unwrap();
        let out = train_vqvae(&pool, &val, &cfg, 5, Some(tmp.path())).unwrap();
        assert!(tmp.path().join("train_curve.csv").exists());
        assert!(tmp.path().join("val_curve.csv").exists());
        assert!(tmp.path().join("train_log.jsonl").exists());
        let (loaded, lcfg, lseed) = load_vq(tmp.path()).unwrap();
        assert_eq!(lcfg, cfg);
        assert_eq!(lseed, 5);
        let indices: Vec<usize> = (0..10).collect();
        let (a, _) = eval_losses(&out.model, &pool, &indices, 8).unwrap();
        let (b, _) = eval_losses(&loaded, &pool, &indices, 8).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(out.model.usage_counts, loaded.usage_counts);
    }

    #[test]
    fn mixed_shape_pool_trains_with_and_without_permutations() {
        let mut tokens = smooth_tokens(12, [8, 8, 4], 6);
        tokens.extend(smooth_tokens(12, [8, 4, 8], 7));
        tokens.extend(smooth_tokens(12, [4, 8, 8], 8));
        let pool = pool_from_arrays(tokens.clone(), [8, 8, 4]).unwrap();
        let val = pool_from_arrays(tokens, [8, 8, 4]).unwrap();
        for permutations in [true, false] {
            let cfg = VqTrainConfig {
                steps: 8,
                permutations,
                ..toy_cfg()
            };
            let out = train_vqvae(&pool, &val, &cfg, 11, None).unwrap();
            assert_eq!(out.train_curve.len(), 8);
            assert!(out.train_curve.iter().all(|p| p.total.is_finite()));
        }
    }

    #[test]
    fn usage_counts_sum_to_quantization_calls() {
        let tokens = smooth_tokens(20, [8, 8, 4], 9);
        let pool = pool_from_arrays(tokens.clone(), [8, 8, 4]).unwrap();
        let val = pool_from_arrays(tokens, [8, 8, 4]).unwrap();
        // no reseed within the run: counts accumulate from step 1
        let cfg = VqTrainConfig {
            steps: 7,
            batch_size: 5,
            reseed_every: 1000,
            eval_every: 1000,
            ..toy_cfg()
        };
        let out = train_vqvae(&pool, &val, &cfg, 13, None).unwrap();
        let total: u64 = out.model.usage_counts.iter().sum();
        assert_eq!(total, 7 * 5);
    }

    #[test]
    fn training_step_pace_supports_long_runs() {
        let tokens = smooth_tokens(64, [32, 32, 4], 10);
        let pool = pool_from_arrays(tokens.clone(), [32, 32, 4]).unwrap();
        let val = pool_from_arrays(tokens, [32, 32, 4]).unwrap();
        let cfg = VqTrainConfig {
            arch: VqArch::default(),
            steps: 20,
            batch_size: 24,
            eval_every: 1000,
            reseed_every: 1000,
            ..Default::default()
        };
        let start = std::time::Instant::now();
        let out = train_vqvae(&pool, &val, &cfg, 15, None).unwrap();
        let per_step = start.elapsed().as_secs_f64() / 20.0;
        println!("vq per-step: {:.1} ms", per_step * 1000.0);
        assert!(out.train_curve.last().unwrap().total.is_finite());
        assert!(per_step < 0.4, "per-step {per_step}s too slow for long runs");
    }
}
