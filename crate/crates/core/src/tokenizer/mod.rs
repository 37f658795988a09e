//! Subvolume tokenization: tile a volume into non-overlapping patches,
//! drop background tokens, permute token axes for orientation-robust
//! training, and attach positional encodings.
//!
//! Patch dimensions are fitted to each volume by size rank, so a
//! 64×64×16 axial volume tiles into (32,32,4) tokens while a 64×16×64
//! coronal volume tiles into (32,4,32) tokens. All native token shapes
//! are therefore permutations of the configured patch dimensions and
//! fall into one of three shape buckets.

use ndarray::{Array1, Array3, s};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cohort::types::{OrientationCode, VoxelVolume};
use crate::error::{Error, Result};
use crate::rng;

/// How patch tiling treats trailing partial patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    ZeroPad,
    Crop,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_dims: [usize; 3],
    pub pad_mode: PadMode,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_dims: [32, 32, 4],
            pad_mode: PadMode::ZeroPad,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_dims.iter().any(|&p| p == 0) {
            return Err(Error::config("patch dimensions must all be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatistic {
    Mean,
    Max,
}

/// Foreground filter: keep tokens whose intensity statistic reaches the
/// threshold (tokens with statistic equal to the threshold are kept, so
/// a zero threshold keeps everything).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundFilter {
    pub threshold: f64,
    pub statistic: FilterStatistic,
}

impl Default for BackgroundFilter {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            statistic: FilterStatistic::Mean,
        }
    }
}

impl BackgroundFilter {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("background threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubvolumeToken {
    pub voxels: Array3<f64>,
    /// Integer grid coordinates of this token within its parent volume.
    pub grid_pos: [usize; 3],
    pub orientation_code: OrientationCode,
    /// Equals the current dims of `voxels`; one of the shape buckets.
    pub shape_bucket: [usize; 3],
}

impl SubvolumeToken {
    pub fn statistic(&self, stat: FilterStatistic) -> f64 {
        match stat {
            FilterStatistic::Mean => self.voxels.mean().unwrap_or(0.0),
            FilterStatistic::Max => self.voxels.iter().cloned().fold(f64::MIN, f64::max),
        }
    }
}

/// All tokens of one volume plus the tiling geometry needed to map
/// tokens back to voxel space.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Vec<SubvolumeToken>,
    /// Patch dims after rank-fitting to this volume's axes.
    pub fitted_dims: [usize; 3],
    /// Number of grid cells along each volume axis.
    pub grid_extents: [usize; 3],
    /// Shape covered by the tiling (padded up or cropped down).
    pub tiled_shape: [usize; 3],
    pub volume_shape: [usize; 3],
}

/// Assign patch dims to volume axes by size rank: the largest patch dim
/// goes to the largest volume axis, ties broken by axis order.
pub fn fitted_patch_dims(vol_shape: [usize; 3], patch_dims: [usize; 3]) -> [usize; 3] {
    let mut axes = [0usize, 1, 2];
    axes.sort_by_key(|&a| (std::cmp::Reverse(vol_shape[a]), a));
    let mut dims = patch_dims;
    dims.sort_by_key(|&p| std::cmp::Reverse(p));
    let mut fitted = [0usize; 3];
    for (rank, &axis) in axes.iter().enumerate() {
        fitted[axis] = dims[rank];
    }
    fitted
}

/// Tile a volume into non-overlapping patch tokens (orientation RAS).
pub fn patch_volume(vol: &VoxelVolume, spec: &PatchSpec) -> Result<TokenGrid> {
    patch_volume_oriented(vol, spec, OrientationCode::RAS)
}

/// Tile a volume into non-overlapping patch tokens, tagging each token
/// with the parent sequence's orientation code.
pub fn patch_volume_oriented(
    vol: &VoxelVolume,
    spec: &PatchSpec,
    code: OrientationCode,
) -> Result<TokenGrid> {
    spec.validate()?;
    let shape = vol.shape();
    let fitted = fitted_patch_dims(shape, spec.patch_dims);
    let extents = match spec.pad_mode {
        PadMode::ZeroPad => [
            shape[0].div_ceil(fitted[0]),
            shape[1].div_ceil(fitted[1]),
            shape[2].div_ceil(fitted[2]),
        ],
        PadMode::Crop => {
            if shape.iter().zip(&fitted).any(|(d, p)| d < p) {
                return Err(Error::shape(format!(
                    "crop mode requires volume dims {shape:?} >= patch dims {fitted:?}"
                )));
            }
            [
                shape[0] / fitted[0],
                shape[1] / fitted[1],
                shape[2] / fitted[2],
            ]
        }
    };
    let tiled = [
        extents[0] * fitted[0],
        extents[1] * fitted[1],
        extents[2] * fitted[2],
    ];
    let mut tokens = Vec::with_capacity(extents.iter().product());
    for i in 0..extents[0] {
        for j in 0..extents[1] {
            for k in 0..extents[2] {
                let start = [i * fitted[0], j * fitted[1], k * fitted[2]];
                let mut voxels = Array3::<f64>::zeros((fitted[0], fitted[1], fitted[2]));
                let copy = [
                    fitted[0].min(shape[0].saturating_sub(start[0])),
                    fitted[1].min(shape[1].saturating_sub(start[1])),
                    fitted[2].min(shape[2].saturating_sub(start[2])),
                ];
                if copy.iter().all(|&c| c > 0) {
                    voxels
                        .slice_mut(s![..copy[0], ..copy[1], ..copy[2]])
                        .assign(&vol.data.slice(s![
                            start[0]..start[0] + copy[0],
                            start[1]..start[1] + copy[1],
                            start[2]..start[2] + copy[2]
                        ]));
                }
                tokens.push(SubvolumeToken {
                    voxels,
                    grid_pos: [i, j, k],
                    orientation_code: code,
                    shape_bucket: fitted,
                });
            }
        }
    }
    Ok(TokenGrid {
        tokens,
        fitted_dims: fitted,
        grid_extents: extents,
        tiled_shape: tiled,
        volume_shape: shape,
    })
}

/// Rebuild the tiled (padded or cropped) volume from a token grid.
/// Grid cells with no token are zero-filled, so reassembling a filtered
/// grid recovers the foreground against a zero background.
pub fn reassemble(grid: &TokenGrid) -> Result<Array3<f64>> {
    let f = grid.fitted_dims;
    let t = grid.tiled_shape;
    let mut out = Array3::<f64>::zeros((t[0], t[1], t[2]));
    for tok in &grid.tokens {
        if tok.voxels.shape() != f {
            return Err(Error::shape(
                "reassemble requires tokens in native (unpermuted) shape",
            ));
        }
        let p = tok.grid_pos;
        if p[0] >= grid.grid_extents[0]
            || p[1] >= grid.grid_extents[1]
            || p[2] >= grid.grid_extents[2]
        {
            return Err(Error::shape("token grid position outside grid extents"));
        }
        out.slice_mut(s![
            p[0] * f[0]..(p[0] + 1) * f[0],
            p[1] * f[1]..(p[1] + 1) * f[1],
            p[2] * f[2]..(p[2] + 1) * f[2]
        ])
        .assign(&tok.voxels);
    }
    Ok(out)
}

/// Keep foreground tokens; order-preserving, grid positions retained.
pub fn filter_background(grid: &TokenGrid, filter: &BackgroundFilter) -> TokenGrid {
    let tokens = grid
        .tokens
        .iter()
        .filter(|t| t.statistic(filter.statistic) >= filter.threshold)
        .cloned()
        .collect();
    TokenGrid {
        tokens,
        ..grid.clone()
    }
}

fn validate_order(order: [usize; 3]) -> Result<()> {
    let mut seen = [false; 3];
    for &a in &order {
        if a > 2 || seen[a] {
            return Err(Error::shape(format!(
                "axis order {order:?} is not a permutation of [0, 1, 2]"
            )));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Reorder a token's voxel axes: output axis `i` takes input axis
/// `order[i]`. Grid position and shape bucket are permuted to match, so
/// applying the inverse order restores the token exactly.
pub fn permute_token_axes(token: &SubvolumeToken, order: [usize; 3]) -> Result<SubvolumeToken> {
    validate_order(order)?;
    let voxels = token
        .voxels
        .clone()
        .permuted_axes([order[0], order[1], order[2]])
        .as_standard_layout()
        .to_owned();
    let grid_pos = [
        token.grid_pos[order[0]],
        token.grid_pos[order[1]],
        token.grid_pos[order[2]],
    ];
    let shape_bucket = [
        token.shape_bucket[order[0]],
        token.shape_bucket[order[1]],
        token.shape_bucket[order[2]],
    ];
    Ok(SubvolumeToken {
        voxels,
        grid_pos,
        orientation_code: token.orientation_code,
        shape_bucket,
    })
}

/// Inverse of an axis order.
pub fn inverse_order(order: [usize; 3]) -> [usize; 3] {
    let mut inv = [0usize; 3];
    for (i, &a) in order.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Order equivalent to applying `p` first and then `q`.
pub fn compose_orders(p: [usize; 3], q: [usize; 3]) -> [usize; 3] {
    [p[q[0]], p[q[1]], p[q[2]]]
}

/// The distinct axis-permuted shapes of the patch dims, sorted; with the
/// default (32,32,4) patches these are the three token-shape buckets.
pub fn bucket_shapes(patch_dims: [usize; 3]) -> Vec<[usize; 3]> {
    const ORDERS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut shapes: Vec<[usize; 3]> = ORDERS
        .iter()
        .map(|o| [patch_dims[o[0]], patch_dims[o[1]], patch_dims[o[2]]])
        .collect();
    shapes.sort();
    shapes.dedup();
    shapes
}

/// Smallest axis order mapping shape `from` onto shape `to`, if any.
pub fn order_between(from: [usize; 3], to: [usize; 3]) -> Option<[usize; 3]> {
    const ORDERS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    ORDERS
        .iter()
        .find(|o| [from[o[0]], from[o[1]], from[o[2]]] == to)
        .copied()
}

/// One shape-homogeneous training draw over a minibatch of volumes.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    /// Foreground tokens grouped by native shape, in `bucket_shapes` order.
    pub buckets: Vec<Vec<SubvolumeToken>>,
    /// The shape names of the buckets, in the same order.
    pub shapes: Vec<[usize; 3]>,
    /// Uniformly selected target shape for this draw.
    pub selected_shape: [usize; 3],
    /// Random axis order applied to the whole stack after coercion.
    pub axis_order: [usize; 3],
    /// Every foreground token, coerced to the selected shape and then
    /// permuted by `axis_order`; shape-homogeneous.
    pub tokens: Vec<SubvolumeToken>,
}

/// Tokenize a minibatch, bucket foreground tokens by native shape,
/// uniformly pick a target shape, and apply one random axis permutation
/// to the stack. Tokens from other buckets are first brought to the
/// target shape so every foreground token participates in the draw.
pub fn bucket_and_sample(
    volumes: &[VoxelVolume],
    spec: &PatchSpec,
    filter: &BackgroundFilter,
    seed: u64,
) -> Result<SampledBatch> {
    if volumes.is_empty() {
        return Err(Error::config("bucket_and_sample requires a non-empty minibatch"));
    }
    filter.validate()?;
    let shapes = bucket_shapes(spec.patch_dims);
    let mut buckets: Vec<Vec<SubvolumeToken>> = vec![Vec::new(); shapes.len()];
    for vol in volumes {
        let grid = patch_volume(vol, spec)?;
        let kept = filter_background(&grid, filter);
        for tok in kept.tokens {
            let idx = shapes
                .iter()
                .position(|&s| s == tok.shape_bucket)
                .ok_or_else(|| Error::shape("token shape outside the bucket set"))?;
            buckets[idx].push(tok);
        }
    }
    if buckets.iter().all(|b| b.is_empty()) {
        return Err(Error::degenerate(
            "no foreground tokens survive background filtering",
        ));
    }
    let mut rng = rng::stream(seed, "bucket-sample", 0);
    let selected = rng.random_range(0..shapes.len());
    let selected_shape = shapes[selected];
    let mut axis_order = [0usize, 1, 2];
    axis_order.shuffle(&mut rng);

    let mut tokens = Vec::new();
    for (bi, bucket) in buckets.iter().enumerate() {
        let to_target = order_between(shapes[bi], selected_shape)
            .ok_or_else(|| Error::shape("bucket shapes are not axis permutations"))?;
        let order = compose_orders(to_target, axis_order);
        for tok in bucket {
            tokens.push(permute_token_axes(tok, order)?);
        }
    }
    Ok(SampledBatch {
        buckets,
        shapes,
        selected_shape,
        axis_order,
        tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingScheme {
    Sinusoidal3d,
    Learned3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    /// Total encoding width; split evenly across the three axes, so it
    /// must be a positive multiple of 6 (sin/cos pairs per axis).
    pub dims: usize,
    pub scheme: EncodingScheme,
}

impl Default for PositionalEncoding {
    fn default() -> Self {
        Self {
            dims: 48,
            scheme: EncodingScheme::Sinusoidal3d,
        }
    }
}

impl PositionalEncoding {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.dims % 6 != 0 {
            return Err(Error::config(
                "positional encoding width must be a positive multiple of 6",
            ));
        }
        Ok(())
    }
}

/// Encode an integer grid position as a fixed vector. Deterministic in
/// (grid_pos, grid_extents) and distinct across grid positions.
///
/// Panics if `grid_pos` lies outside `grid_extents`; validate inputs at
/// the call site.
pub fn positional_encode(
    grid_pos: [usize; 3],
    grid_extents: [usize; 3],
    enc: &PositionalEncoding,
) -> Array1<f64> {
    enc.validate().expect("invalid positional encoding config");
    for a in 0..3 {
        assert!(
            grid_pos[a] < grid_extents[a],
            "grid position {grid_pos:?} outside extents {grid_extents:?}"
        );
    }
    let per_axis = enc.dims / 3;
    let mut out = Array1::<f64>::zeros(enc.dims);
    match enc.scheme {
        EncodingScheme::Sinusoidal3d => {
            for a in 0..3 {
                let pos = grid_pos[a] as f64;
                for i in 0..per_axis / 2 {
                    let rate = pos / 10000f64.powf(2.0 * i as f64 / per_axis as f64);
                    out[a * per_axis + 2 * i] = rate.sin();
                    out[a * per_axis + 2 * i + 1] = rate.cos();
                }
            }
        }
        EncodingScheme::Learned3d => {
            // Fixed pseudo-random table entries, keyed by axis, position,
            // and extent so the mapping is stable across calls.
            for a in 0..3 {
                let index = a as u64
                    + 3 * (grid_pos[a] as u64)
                    + 1_000_003 * (grid_extents[a] as u64);
                let mut r = rng::stream(0x706f_73656e, "learned-posenc", index);
                for i in 0..per_axis {
                    let u1: f64 = r.random::<f64>().max(1e-12);
                    let u2: f64 = r.random();
                    out[a * per_axis + i] = 0.5
                        * (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos();
                    let _ = i;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::config::CohortConfig;
    use crate::cohort::generate::generate_cohort_records;
    use proptest::prelude::*;

    fn vol(shape: [usize; 3], mut fill: impl FnMut(usize, usize, usize) -> f64) -> VoxelVolume {
        let mut data = Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
        for ((i, j, k), v) in data.indexed_iter_mut() {
            *v = fill(i, j, k);
        }
        VoxelVolume {
            data,
            voxel_spacing: [1.0, 1.0, 1.0],
        }
    }

    fn ramp(shape: [usize; 3]) -> VoxelVolume {
        vol(shape, |i, j, k| {
            ((i * 31 + j * 7 + k * 13) % 97) as f64 / 97.0
        })
    }

    #[test]
    fn default_patching_counts_and_fit() {
        let spec = PatchSpec::default();
        let g = patch_volume(&ramp([64, 64, 16]), &spec).unwrap();
        assert_eq!(g.tokens.len(), 16);
        assert_eq!(g.fitted_dims, [32, 32, 4]);
        let g = patch_volume(&ramp([64, 16, 64]), &spec).unwrap();
        assert_eq!(g.fitted_dims, [32, 4, 32]);
        assert_eq!(g.tokens.len(), 16);
        let g = patch_volume(&ramp([16, 64, 64]), &spec).unwrap();
        assert_eq!(g.fitted_dims, [4, 32, 32]);
        assert_eq!(g.tokens.len(), 16);
    }

    #[test]
    fn zero_pad_counts_and_pad_region() {
        let spec = PatchSpec::default();
        let g = patch_volume(&ramp([65, 64, 16]), &spec).unwrap();
        assert_eq!(g.grid_extents, [3, 2, 4]);
        assert_eq!(g.tokens.len(), 24);
        let re = reassemble(&g).unwrap();
        assert_eq!(re.shape(), &[96, 64, 16]);
        // padded region beyond the source volume is exactly zero
        assert!(re.slice(s![65.., .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reassemble_round_trips_voxel_exactly() {
        let v = ramp([40, 28, 10]);
        let spec = PatchSpec {
            patch_dims: [16, 16, 4],
            pad_mode: PadMode::ZeroPad,
        };
        let g = patch_volume(&v, &spec).unwrap();
        let re = reassemble(&g).unwrap();
        for ((i, j, k), &x) in v.data.indexed_iter() {
            assert_eq!(re[[i, j, k]], x);
        }
    }

    #[test]
    fn crop_mode_rejects_small_volumes_and_crops_remainders() {
        let spec = PatchSpec {
            patch_dims: [32, 32, 4],
            pad_mode: PadMode::Crop,
        };
        assert!(patch_volume(&ramp([16, 16, 2]), &spec).is_err());
        let g = patch_volume(&ramp([65, 64, 17]), &spec).unwrap();
        assert_eq!(g.grid_extents, [2, 2, 4]);
        assert_eq!(g.tiled_shape, [64, 64, 16]);
    }

    #[test]
    fn filter_keeps_all_at_zero_threshold_and_drops_zero_tokens() {
        let v = vol([64, 64, 16], |i, _, _| if i < 32 { 0.5 } else { 0.0 });
        let g = patch_volume(&v, &PatchSpec::default()).unwrap();
        let all = filter_background(
            &g,
            &BackgroundFilter {
                threshold: 0.0,
                statistic: FilterStatistic::Mean,
            },
        );
        assert_eq!(all.tokens.len(), g.tokens.len());
        let kept = filter_background(&g, &BackgroundFilter::default());
        assert_eq!(kept.tokens.len(), 8);
        assert!(kept.tokens.iter().all(|t| t.grid_pos[0] == 0));
        // order preserved
        let order: Vec<_> = kept.tokens.iter().map(|t| t.grid_pos).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
    }

    #[test]
    fn permute_axes_matches_example_and_inverts() {
        let v = ramp([64, 64, 16]);
        let g = patch_volume(&v, &PatchSpec::default()).unwrap();
        let t = &g.tokens[5];
        let p = permute_token_axes(t, [2, 0, 1]).unwrap();
        assert_eq!(p.shape_bucket, [4, 32, 32]);
        assert_eq!(p.voxels.shape(), &[4, 32, 32]);
        for i in 0..32 {
            for j in 0..32 {
                for k in 0..4 {
                    assert_eq!(p.voxels[[k, i, j]], t.voxels[[i, j, k]]);
                }
            }
        }
        let back = permute_token_axes(&p, inverse_order([2, 0, 1])).unwrap();
        assert_eq!(back, *t);
        let id = permute_token_axes(t, [0, 1, 2]).unwrap();
        assert_eq!(id, *t);
        assert!(permute_token_axes(t, [0, 0, 2]).is_err());
    }

    #[test]
    fn bucket_sampling_is_deterministic_and_uniform() {
        let vols = vec![ramp([64, 64, 16]), ramp([64, 16, 64]), ramp([16, 64, 64])];
        let spec = PatchSpec::default();
        let filter = BackgroundFilter::default();
        let a = bucket_and_sample(&vols, &spec, &filter, 33).unwrap();
        let b = bucket_and_sample(&vols, &spec, &filter, 33).unwrap();
        assert_eq!(a.selected_shape, b.selected_shape);
        assert_eq!(a.axis_order, b.axis_order);
        assert_eq!(a.tokens.len(), b.tokens.len());
        // homogeneous output shape
        let shape = a.tokens[0].voxels.shape().to_vec();
        assert!(a.tokens.iter().all(|t| t.voxels.shape() == &shape[..]));

        let mut counts = std::collections::HashMap::new();
        for seed in 0..600u64 {
            let s = bucket_and_sample(&vols, &spec, &filter, seed).unwrap();
            *counts.entry(s.selected_shape).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        for (_, c) in counts {
            let f = c as f64 / 600.0;
            assert!((f - 1.0 / 3.0).abs() <= 0.06, "frequency {f}");
        }
    }

    #[test]
    fn axial_only_batch_populates_native_bucket() {
        let vols = vec![ramp([64, 64, 16]), ramp([64, 64, 16])];
        let s = bucket_and_sample(&vols, &PatchSpec::default(), &BackgroundFilter::default(), 1)
            .unwrap();
        let native = s.shapes.iter().position(|&b| b == [32, 32, 4]).unwrap();
        assert!(!s.buckets[native].is_empty());
        for (i, b) in s.buckets.iter().enumerate() {
            if i != native {
                assert!(b.is_empty());
            }
        }
    }

    #[test]
    fn empty_foreground_is_degenerate() {
        let vols = vec![vol([64, 64, 16], |_, _, _| 0.0)];
        let err = bucket_and_sample(&vols, &PatchSpec::default(), &BackgroundFilter::default(), 1)
            .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "{err}");
    }

    #[test]
    fn positional_encoding_origin_and_injectivity() {
        let enc = PositionalEncoding::default();
        let origin = positional_encode([0, 0, 0], [2, 2, 4], &enc);
        for i in 0..enc.dims {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(origin[i], expect);
        }
        let mut seen: Vec<Array1<f64>> = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..4 {
                    let e = positional_encode([i, j, k], [2, 2, 4], &enc);
                    let f = positional_encode([i, j, k], [2, 2, 4], &enc);
                    assert_eq!(e, f);
                    for prev in &seen {
                        let d: f64 = (&e - prev).mapv(f64::abs).sum();
                        assert!(d > 1e-9, "duplicate encoding");
                    }
                    seen.push(e);
                }
            }
        }
        let learned = PositionalEncoding {
            dims: 12,
            scheme: EncodingScheme::Learned3d,
        };
        let a = positional_encode([1, 0, 2], [2, 2, 4], &learned);
        let b = positional_encode([1, 0, 2], [2, 2, 4], &learned);
        assert_eq!(a, b);
    }

    #[test]
    fn lesion_voxels_survive_background_filtering() {
        let cfg = CohortConfig {
            n_studies: 4,
            ..Default::default()
        };
        let (records, _) = generate_cohort_records(&cfg, 5).unwrap();
        let spec = PatchSpec::default();
        let filter = BackgroundFilter::default();
        let mut checked = 0usize;
        for rec in &records {
            let transforms = rec.sequence_transforms();
            for ((_, volume), tf) in rec.sequences.iter().zip(&transforms) {
                let grid = patch_volume(volume, &spec).unwrap();
                let kept = filter_background(&grid, &filter);
                let f = kept.fitted_dims;
                let mut covered =
                    Array3::<bool>::from_elem(volume.data.raw_dim(), false);
                let cshape = [covered.shape()[0], covered.shape()[1], covered.shape()[2]];
                for tok in &kept.tokens {
                    let p = tok.grid_pos;
                    covered
                        .slice_mut(s![
                            p[0] * f[0]..((p[0] + 1) * f[0]).min(cshape[0]),
                            p[1] * f[1]..((p[1] + 1) * f[1]).min(cshape[1]),
                            p[2] * f[2]..((p[2] + 1) * f[2]).min(cshape[2])
                        ])
                        .fill(true);
                }
                for (_, mask) in &rec.lesion_masks {
                    let tmask = tf.apply_mask(mask);
                    for ((i, j, k), &m) in tmask.indexed_iter() {
                        if m {
                            assert!(
                                covered[[i, j, k]],
                                "lesion voxel ({i},{j},{k}) dropped in {}",
                                rec.study_id
                            );
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked > 0, "cohort contained no lesion voxels");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tiling_partitions_padded_volume(
            d0 in 5usize..48, d1 in 5usize..48, d2 in 3usize..12,
            p0 in 2usize..9, p1 in 2usize..9, p2 in 1usize..5,
        ) {
            let v = ramp([d0, d1, d2]);
            let spec = PatchSpec { patch_dims: [p0, p1, p2], pad_mode: PadMode::ZeroPad };
            let g = patch_volume(&v, &spec).unwrap();
            prop_assert_eq!(g.tokens.len(), g.grid_extents.iter().product::<usize>());
            // disjoint + covering: every padded voxel written exactly once
            let mut counts = Array3::<u32>::zeros((g.tiled_shape[0], g.tiled_shape[1], g.tiled_shape[2]));
            let f = g.fitted_dims;
            for tok in &g.tokens {
                let p = tok.grid_pos;
                for x in counts.slice_mut(s![
                    p[0]*f[0]..(p[0]+1)*f[0],
                    p[1]*f[1]..(p[1]+1)*f[1],
                    p[2]*f[2]..(p[2]+1)*f[2]
                ]).iter_mut() { *x += 1; }
            }
            prop_assert!(counts.iter().all(|&c| c == 1));
            let re = reassemble(&g).unwrap();
            for ((i,j,k), &x) in v.data.indexed_iter() {
                prop_assert_eq!(re[[i,j,k]], x);
            }
        }

        #[test]
        fn filter_is_monotone_in_threshold(
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, seed in 0u64..1000,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mut r = rng::stream(seed, "prop-filter", 0);
            let v = vol([16, 16, 8], |_, _, _| r.random::<f64>());
            let spec = PatchSpec { patch_dims: [8, 8, 4], pad_mode: PadMode::ZeroPad };
            let g = patch_volume(&v, &spec).unwrap();
            let keep = |t: f64| {
                filter_background(&g, &BackgroundFilter { threshold: t, statistic: FilterStatistic::Mean })
                    .tokens.iter().map(|x| x.grid_pos).collect::<std::collections::BTreeSet<_>>()
            };
            let khi = keep(hi);
            let klo = keep(lo);
            prop_assert!(khi.is_subset(&klo));
        }

        #[test]
        fn permutation_composition_is_closed(
            pi in 0usize..6, qi in 0usize..6, seed in 0u64..100,
        ) {
            const ORDERS: [[usize; 3]; 6] = [
                [0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0],
            ];
            let p = ORDERS[pi];
            let q = ORDERS[qi];
            let mut r = rng::stream(seed, "prop-perm", 0);
            let v = vol([8, 6, 4], |_, _, _| r.random::<f64>());
            let g = patch_volume(&v, &PatchSpec { patch_dims: [4, 3, 2], pad_mode: PadMode::ZeroPad }).unwrap();
            let t = &g.tokens[0];
            let two = permute_token_axes(&permute_token_axes(t, p).unwrap(), q).unwrap();
            let one = permute_token_axes(t, compose_orders(p, q)).unwrap();
            prop_assert_eq!(two, one);
        }

        #[test]
        fn every_native_shape_lands_in_one_bucket(
            d0 in 5usize..40, d1 in 5usize..40, d2 in 3usize..40,
        ) {
            let v = ramp([d0, d1, d2]);
            let g = patch_volume(&v, &PatchSpec::default()).unwrap();
            let shapes = bucket_shapes([32, 32, 4]);
            let hits: Vec<usize> = shapes.iter().enumerate()
                .filter(|(_, &s)| s == g.fitted_dims)
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(hits.len(), 1);
        }
    }
}
