//! Synthetic cohort generation: per-study anatomy, per-sequence contrast
//! remapping and axis transforms, lesion planting with ground-truth
//! masks, patient/split packing, and report rendering.
//!
//! Lesions are planted after the per-sequence contrast remap and axis
//! transform, so the "mask voxels exceed the local background mean by the
//! configured contrast" invariant holds in every stored volume exactly as
//! a verifier would measure it.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::cohort::config::CohortConfig;
use crate::cohort::templates::{
    self, PLANE_TAGS, SEQUENCE_TYPES, STUDY_NAMES,

};
use crate::cohort::types::{
    diagnosis_to_priority, sequence_transform, LabelVector, OrientationCode, Plane, ReportDoc,
    SequenceMeta, Split, StudyRecord, SubgroupAttrs, VoxelVolume,
};
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::text::vocab::Vocabulary;

/// Highest intensity the contrast remap can produce inside the head;
/// leaves headroom for lesion contrast plus texture under the 0.98 cap.
const HEAD_MAX: f64 = 0.60;
const HEAD_MIN: f64 = 0.10;
const LESION_TEXTURE: f64 = 0.04;
const LESION_CAP: f64 = 0.98;

/// Fractional zone center (of the canonical shape) for a diagnosis.
fn zone_center_frac(dx: usize) -> [f64; 3] {
    const XY: [[f64; 2]; 4] = [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]];
    const Z: [f64; 3] = [0.3125, 0.625, 0.78];
    let xy = XY[dx % 4];
    let z = Z[(dx / 4) % 3];
    [xy[0], xy[1], z]
}

/// Two diagnoses may co-occur in one study only if their zones sit in
/// different in-plane quadrants, keeping lesions and their local
/// background estimates disjoint.
pub fn zones_compatible(a: usize, b: usize) -> bool {
    a % 4 != b % 4
}

/// Smooth per-study anatomy: a head ellipsoid filled with low-frequency
/// blobs, near-zero noise outside.
fn generate_anatomy(shape: [usize; 3], noise: f64, r: &mut Rng) -> (Array3<f64>, Array3<bool>) {
    let c = [
        shape[0] as f64 / 2.0,
        shape[1] as f64 / 2.0,
        shape[2] as f64 / 2.0,
    ];
    let radii = [c[0] * 0.84, c[1] * 0.84, c[2] * 0.84];

    // low-frequency bumps, roughly isotropic in mm terms
    let n_bumps = 6;
    let mut bumps = Vec::with_capacity(n_bumps);
    for _ in 0..n_bumps {
        let pos = [
            c[0] + (r.random::<f64>() - 0.5) * radii[0] * 1.4,
            c[1] + (r.random::<f64>() - 0.5) * radii[1] * 1.4,
            c[2] + (r.random::<f64>() - 0.5) * radii[2] * 1.4,
        ];
        let amp = (r.random::<f64>() - 0.5) * 0.24;
        let sigma = 4.0 + r.random::<f64>() * 6.0;
        bumps.push((pos, amp, sigma));
    }

    let mut vol = Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
    let mut head = Array3::<bool>::from_elem((shape[0], shape[1], shape[2]), false);
    // anisotropic voxels: through-plane (axis 2) voxels are ~4x coarser
    let zscale = (shape[0] as f64 / shape[2] as f64).max(1.0);
    for ((i, j, k), v) in vol.indexed_iter_mut() {
        let p = [i as f64, j as f64, k as f64];
        let e = ((p[0] - c[0]) / radii[0]).powi(2)
            + ((p[1] - c[1]) / radii[1]).powi(2)
            + ((p[2] - c[2]) / radii[2]).powi(2);
        if e <= 1.0 {
            head[[i, j, k]] = true;
            let mut t = 0.30;
            for (pos, amp, sigma) in &bumps {
                let d2 = (p[0] - pos[0]).powi(2)
                    + (p[1] - pos[1]).powi(2)
                    + ((p[2] - pos[2]) * zscale).powi(2);
                t += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            // soft edge falloff toward the skull boundary
            t *= 1.0 - 0.4 * e * e;
            *v = t.clamp(HEAD_MIN + 0.05, 0.55);
        } else {
            *v = r.random::<f64>() * noise;
        }
    }
    (vol, head)
}

/// Monotone intensity remap emulating a sequence type's contrast. The
/// remap applies inside the head only and keeps values in
/// [HEAD_MIN, HEAD_MAX].
fn contrast_remap(base: &Array3<f64>, head: &Array3<bool>, seq_type: &str, r: &mut Rng) -> Array3<f64> {
    // (offset, slope) pairs per type; slope may be negative (inversion)
    let (alpha, beta) = match seq_type {
        t if t.starts_with("T1") => (0.02, 1.00),
        "T2" => (0.62, -0.90),
        "FLAIR" => (0.12, 0.72),
        _ => (0.06, 0.62), // DWI and anything else
    };
    let noise_amp = 0.008;
    let mut out = base.clone();
    for (v, &h) in out.iter_mut().zip(head.iter()) {
        if h {
            let mapped = alpha + beta * *v + (r.random::<f64>() - 0.5) * noise_amp;
            *v = mapped.clamp(HEAD_MIN, HEAD_MAX);
        }
    }
    out
}

/// Voxel set of one lesion archetype around `center` (canonical coords).
/// Geometry varies by diagnosis; all archetypes are planted as
/// positive-contrast voxel sets.
fn lesion_mask(
    shape: [usize; 3],
    dx: usize,
    center: [f64; 3],
    radius: f64,
    r: &mut Rng,
) -> Array3<bool> {
    let mut mask = Array3::<bool>::from_elem((shape[0], shape[1], shape[2]), false);
    // through-plane radius is compressed like the anatomy
    let rz = (radius * 0.5).max(1.5);
    let geometry = dx % 6;
    let u = [
        (r.random::<f64>() - 0.5),
        (r.random::<f64>() - 0.5),
        (r.random::<f64>() - 0.5),
    ];
    let blob_offsets: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            [
                (r.random::<f64>() - 0.5) * radius * 1.6,
                (r.random::<f64>() - 0.5) * radius * 1.6,
                (r.random::<f64>() - 0.5) * rz * 1.2,
            ]
        })
        .collect();
    for ((i, j, k), m) in mask.indexed_iter_mut() {
        let d = [
            i as f64 - center[0],
            j as f64 - center[1],
            k as f64 - center[2],
        ];
        let rho =
            ((d[0] / radius).powi(2) + (d[1] / radius).powi(2) + (d[2] / rz).powi(2)).sqrt();
        let inside = match geometry {
            0 => rho <= 1.0,                                   // sphere
            1 => {
                // ellipsoid, elongated in-plane
                let e = (d[0] / (radius * 1.3)).powi(2)
                    + (d[1] / (radius * 0.75)).powi(2)
                    + (d[2] / rz).powi(2);
                e <= 1.0
            }
            2 => (0.62..=1.0).contains(&rho),                  // rim shell
            3 => blob_offsets.iter().any(|o| {
                // lobulated multi-blob
                let b = [d[0] - o[0], d[1] - o[1], d[2] - o[2]];
                ((b[0] / (radius * 0.55)).powi(2)
                    + (b[1] / (radius * 0.55)).powi(2)
                    + (b[2] / (rz * 0.7)).powi(2))
                    <= 1.0
            }),
            4 => rho <= 1.15 && (d[0] * u[0] + d[1] * u[1]) >= 0.0, // wedge
            _ => d[2].abs() <= rz * 0.6 && (d[0].powi(2) + d[1].powi(2)).sqrt() <= radius * 1.25, // plate
        };
        if inside {
            *m = true;
        }
    }
    mask
}

/// Mean intensity in a dilated bounding box around the mask, excluding
/// mask voxels themselves.
fn local_background_mean(vol: &Array3<f64>, mask: &Array3<bool>) -> f64 {
    let s = vol.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for ((i, j, k), &m) in mask.indexed_iter() {
        if m {
            lo[0] = lo[0].min(i);
            lo[1] = lo[1].min(j);
            lo[2] = lo[2].min(k);
            hi[0] = hi[0].max(i);
            hi[1] = hi[1].max(j);
            hi[2] = hi[2].max(k);
        }
    }
    let dilate = 3usize;
    let lo = [
        lo[0].saturating_sub(dilate),
        lo[1].saturating_sub(dilate),
        lo[2].saturating_sub(dilate),
    ];
    let hi = [
        (hi[0] + dilate).min(s[0] - 1),
        (hi[1] + dilate).min(s[1] - 1),
        (hi[2] + dilate).min(s[2] - 1),
    ];
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in lo[0]..=hi[0] {
        for j in lo[1]..=hi[1] {
            for k in lo[2]..=hi[2] {
                if !mask[[i, j, k]] {
                    sum += vol[[i, j, k]];
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Plant one lesion into a sequence volume (already in stored
/// orientation); the mask is given in the same stored orientation.
fn plant_lesion(vol: &mut Array3<f64>, mask: &Array3<bool>, contrast: f64, r: &mut Rng) {
    let base = local_background_mean(vol, mask);
    for (v, &m) in vol.iter_mut().zip(mask.iter()) {
        if m {
            let texture = (0.1 + 0.9 * r.random::<f64>()) * LESION_TEXTURE;
            *v = (base + contrast + texture).min(LESION_CAP);
        }
    }
}

fn sample_categorical(weights: &[f64], r: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = r.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        t -= w;
        if t <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn sample_subgroup(cfg: &CohortConfig, r: &mut Rng) -> SubgroupAttrs {
    const SEX: [&str; 2] = ["female", "male"];
    const AGE: [&str; 3] = ["under-40", "40-65", "over-65"];
    const RACE: [&str; 4] = ["group-a", "group-b", "group-c", "group-d"];
    const INSURANCE: [&str; 2] = ["public", "private"];
    const SCANNER: [&str; 3] = ["scanner-1", "scanner-2", "scanner-3"];
    SubgroupAttrs {
        sex: SEX[sample_categorical(&cfg.subgroup_sex, r) % SEX.len()].into(),
        age_band: AGE[sample_categorical(&cfg.subgroup_age, r) % AGE.len()].into(),
        race_code: RACE[sample_categorical(&cfg.subgroup_race, r) % RACE.len()].into(),
        insurance_code: INSURANCE
            [sample_categorical(&cfg.subgroup_insurance, r) % INSURANCE.len()]
        .into(),
        scanner_code: SCANNER[sample_categorical(&cfg.subgroup_scanner, r) % SCANNER.len()]
            .into(),
    }
}

/// Sample a study's positive diagnosis set (0, 1, or 2 bits).
fn sample_bits(cfg: &CohortConfig, r: &mut Rng) -> Vec<u8> {
    let mut bits = vec![0u8; cfg.n_diagnoses];
    let k = sample_categorical(&cfg.positive_count_weights, r);
    if k == 0 {
        return bits;
    }
    let weights: Vec<f64> = (0..cfg.n_diagnoses).map(|d| cfg.diagnosis_weight(d)).collect();
    let first = sample_categorical(&weights, r);
    bits[first] = 1;
    if k == 2 && cfg.n_diagnoses > 1 {
        // rejection-sample a zone-compatible partner
        for _ in 0..64 {
            let second = sample_categorical(&weights, r);
            if second != first && zones_compatible(first, second) {
                bits[second] = 1;
                break;
            }
        }
    }
    bits
}

fn sample_sequences(cfg: &CohortConfig, r: &mut Rng) -> Vec<SequenceMeta> {
    let n = r.random_range(cfg.sequences_min..=cfg.sequences_max);
    let mut metas = Vec::with_capacity(n);
    let mut type_order: Vec<&str> = SEQUENCE_TYPES.to_vec();
    type_order.shuffle(r);
    for s in 0..n {
        // axial-weighted plane mix so all three buckets appear cohort-wide
        let plane = match sample_categorical(&[0.5, 0.25, 0.25], r) {
            0 => Plane::Axial,
            1 => Plane::Coronal,
            _ => Plane::Sagittal,
        };
        let code = OrientationCode::ALL[sample_categorical(&[0.55, 0.2, 0.15, 0.1], r)];
        let ty = type_order[s % type_order.len()];
        let tag = PLANE_TAGS[plane as usize];
        metas.push(SequenceMeta {
            sequence_name: format!("{tag} {ty}"),
            plane,
            orientation_code: code,
        });
    }
    metas
}

/// Build one study record (volumes, masks, report, labels).
#[allow(clippy::too_many_arguments)]
fn generate_study(
    cfg: &CohortConfig,
    seed: u64,
    index: usize,
    patient_id: &str,
    subgroup: &SubgroupAttrs,
    split: Split,
    vocab: &Vocabulary,
) -> StudyRecord {
    let mut r = rng::stream(seed, "study", index as u64);
    let shape = cfg.volume_shape;
    let bits = sample_bits(cfg, &mut r);
    let priority = diagnosis_to_priority(&bits, &cfg.priority_table());

    let (anatomy, head) = generate_anatomy(shape, cfg.background_noise, &mut r);

    // canonical-space lesion masks, one per positive diagnosis
    let mut lesion_masks: Vec<(usize, Array3<bool>)> = Vec::new();
    for (dx, &b) in bits.iter().enumerate() {
        if b == 0 {
            continue;
        }
        let frac = zone_center_frac(dx);
        let center = [
            frac[0] * shape[0] as f64 + (r.random::<f64>() - 0.5) * 4.0,
            frac[1] * shape[1] as f64 + (r.random::<f64>() - 0.5) * 4.0,
            frac[2] * shape[2] as f64 + (r.random::<f64>() - 0.5) * 2.0,
        ];
        let radius = cfg.lesion_radius * (0.85 + 0.3 * r.random::<f64>());
        let mask = lesion_mask(shape, dx, center, radius, &mut r);
        debug_assert!(mask.iter().any(|&m| m), "lesion mask empty for dx {dx}");
        lesion_masks.push((dx, mask));
    }

    let metas = sample_sequences(cfg, &mut r);
    let mut sequences = Vec::with_capacity(metas.len());
    for meta in metas {
        let seq_type = meta
            .sequence_name
            .split_once(' ')
            .map(|(_, t)| t)
            .unwrap_or("T1");
        let remapped = contrast_remap(&anatomy, &head, seq_type, &mut r);
        let t = sequence_transform(meta.plane, meta.orientation_code);
        let mut vol = t.apply(&remapped);
        for (_, mask) in &lesion_masks {
            let mask_seq = t.apply_mask(mask);
            plant_lesion(&mut vol, &mask_seq, cfg.lesion_contrast, &mut r);
        }
        sequences.push((
            meta,
            VoxelVolume {
                data: vol,
                voxel_spacing: [1.0, 1.0, 4.0],
            },
        ));
    }

    let report = templates::render_report(&bits, &mut r, vocab);
    let full_report = templates::render_full_report(&report, &mut r, vocab);
    let study_name = STUDY_NAMES[r.random_range(0..STUDY_NAMES.len())].to_string();

    StudyRecord {
        study_id: format!("study_{index:04}"),
        patient_id: patient_id.to_string(),
        study_name,
        sequences,
        report,
        full_report,
        labels: LabelVector { bits, priority },
        subgroup: subgroup.clone(),
        split,
        lesion_masks,
    }
}

/// Patient packing + split assignment, exact prospective count.
struct PatientPlan {
    patient_id: String,
    n_studies: usize,
    split: Split,
    subgroup: SubgroupAttrs,
}

fn plan_patients(cfg: &CohortConfig, seed: u64) -> Vec<PatientPlan> {
    let mut r = rng::stream(seed, "patients", 0);
    let mut remaining = cfg.n_studies;
    let mut sizes = Vec::new();
    while remaining > 0 {
        let take = if remaining >= 2 && r.random::<f64>() < cfg.two_study_patient_fraction {
            2
        } else {
            1
        };
        sizes.push(take);
        remaining -= take;
    }
    let target = (cfg.n_studies as f64 * cfg.prospective_fraction).round() as usize;

    // choose prospective patients: shuffle, then greedily fill capacity,
    // preferring larger patients first so the exact target is reachable
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(&mut r);
    order.sort_by_key(|&i| std::cmp::Reverse(sizes[i]));
    let mut capacity = target;
    let mut split = vec![Split::Retrospective; sizes.len()];
    for &i in &order {
        if sizes[i] <= capacity {
            split[i] = Split::Prospective;
            capacity -= sizes[i];
        }
        if capacity == 0 {
            break;
        }
    }
    debug_assert_eq!(capacity, 0, "prospective target not reachable");

    sizes
        .into_iter()
        .enumerate()
        .map(|(i, n)| PatientPlan {
            patient_id: format!("patient_{i:04}"),
            n_studies: n,
            split: split[i],
            subgroup: sample_subgroup(cfg, &mut r),
        })
        .collect()
}

/// Generate the full cohort in memory. Deterministic in (config, seed).
pub fn generate_cohort_records(
    cfg: &CohortConfig,
    seed: u64,
) -> Result<(Vec<StudyRecord>, Vocabulary)> {
    cfg.validate()?;
    let vocab = templates::build_vocabulary(cfg.n_diagnoses);
    let patients = plan_patients(cfg, seed);
    let mut records = Vec::with_capacity(cfg.n_studies);
    let mut index = 0usize;
    for p in &patients {
        for _ in 0..p.n_studies {
            records.push(generate_study(
                cfg,
                seed,
                index,
                &p.patient_id,
                &p.subgroup,
                p.split,
                &vocab,
            ));
            index += 1;
        }
    }
    for rec in &records {
        rec.validate()?;
    }
    Ok((records, vocab))
}

/// Convenience: rendered report for a bit pattern outside full generation.
pub fn render_report_for_bits(bits: &[u8], seed: u64, vocab: &Vocabulary) -> ReportDoc {
    let mut r = rng::stream(seed, "report", 0);
    templates::render_report(bits, &mut r, vocab)
}
