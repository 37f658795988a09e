//! Cohort persistence: raw little-endian f32 volumes, bit-packed lesion
//! masks, JSON sidecars, and a checksummed manifest that makes loads
//! fail loudly on corruption.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::config::CohortConfig;
use crate::cohort::generate::generate_cohort_records;
use crate::cohort::types::{
    CohortManifest, LabelVector, SequenceMeta, Split, StudyDescriptor, StudyRecord,
    SubgroupAttrs, VoxelVolume, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::text::vocab::Vocabulary;

#[derive(Debug, Serialize, Deserialize)]
struct SequenceSidecar {
    meta: SequenceMeta,
    shape: [usize; 3],
    voxel_spacing: [f64; 3],
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSidecar {
    dx: usize,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StudySidecar {
    study_id: String,
    patient_id: String,
    study_name: String,
    labels: LabelVector,
    subgroup: SubgroupAttrs,
    split: Split,
    sequences: Vec<SequenceSidecar>,
    masks: Vec<MaskSidecar>,
    report_file: String,
    full_report_file: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize a volume as little-endian f32 in row-major order.
pub fn volume_to_bytes(data: &Array3<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn volume_from_bytes(bytes: &[u8], shape: [usize; 3]) -> Result<Array3<f64>> {
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::shape(format!(
            "volume byte length {} does not match shape {:?}",
            bytes.len(),
            shape
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), vals)
        .map_err(|e| Error::shape(e.to_string()))
}

/// Bit-pack a boolean mask in row-major order.
pub fn mask_to_bytes(mask: &Array3<bool>) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn mask_from_bytes(bytes: &[u8], shape: [usize; 3]) -> Result<Array3<bool>> {
    let n: usize = shape.iter().product();
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::shape("mask byte length does not match shape"));
    }
    let vals: Vec<bool> = (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), vals)
        .map_err(|e| Error::shape(e.to_string()))
}

struct ChecksumWriter {
    root: PathBuf,
    checksums: std::collections::BTreeMap<String, String>,
}

impl ChecksumWriter {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.checksums.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

/// Persist records + vocabulary + config to `dir` and return the manifest.
pub fn save_cohort(
    records: &[StudyRecord],
    vocab: &Vocabulary,
    cfg: &CohortConfig,
    seed: u64,
    dir: &Path,
) -> Result<CohortManifest> {
    fs::create_dir_all(dir)?;
    let mut w = ChecksumWriter {
        root: dir.to_path_buf(),
        checksums: Default::default(),
    };
    let mut descriptors = Vec::with_capacity(records.len());
    for rec in records {
        let sdir = rec.study_id.clone();
        let mut sequences = Vec::new();
        for (i, (meta, vol)) in rec.sequences.iter().enumerate() {
            let file = format!("{sdir}/seq_{i}.f32");
            w.write(&file, &volume_to_bytes(&vol.data))?;
            sequences.push(SequenceSidecar {
                meta: meta.clone(),
                shape: vol.shape(),
                voxel_spacing: vol.voxel_spacing,
                file,
            });
        }
        let mut masks = Vec::new();
        for (dx, mask) in &rec.lesion_masks {
            let file = format!("{sdir}/mask_{dx:02}.bin");
            w.write(&file, &mask_to_bytes(mask))?;
            masks.push(MaskSidecar { dx: *dx, file });
        }
        let report_file = format!("{sdir}/report.txt");
        w.write(&report_file, rec.report.text.as_bytes())?;
        let full_report_file = format!("{sdir}/report_full.txt");
        w.write(&full_report_file, rec.full_report.text.as_bytes())?;

        let sidecar = StudySidecar {
            study_id: rec.study_id.clone(),
            patient_id: rec.patient_id.clone(),
            study_name: rec.study_name.clone(),
            labels: rec.labels.clone(),
            subgroup: rec.subgroup.clone(),
            split: rec.split,
            sequences,
            masks,
            report_file,
            full_report_file,
        };
        w.write(
            &format!("{sdir}/study.json"),
            serde_json::to_string_pretty(&sidecar)?.as_bytes(),
        )?;

        descriptors.push(StudyDescriptor {
            study_id: rec.study_id.clone(),
            patient_id: rec.patient_id.clone(),
            dir: sdir,
            n_sequences: rec.sequences.len(),
            label_bits: rec.labels.bits.clone(),
            priority: rec.labels.priority,
            subgroup: rec.subgroup.clone(),
            split: rec.split,
        });
    }
    w.write("vocab.json", vocab.to_json()?.as_bytes())?;
    w.write("config.toml", cfg.to_toml()?.as_bytes())?;

    let manifest = CohortManifest {
        version: MANIFEST_VERSION,
        seed,
        n_diagnoses: cfg.n_diagnoses,
        canonical_shape: cfg.volume_shape,
        studies: descriptors,
        checksums: w.checksums,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Generate and persist a cohort in one call.
pub fn generate_cohort(cfg: &CohortConfig, seed: u64, dir: &Path) -> Result<CohortManifest> {
    let (records, vocab) = generate_cohort_records(cfg, seed)?;
    save_cohort(&records, &vocab, cfg, seed, dir)
}

fn read_checked(
    dir: &Path,
    rel: &str,
    manifest: &CohortManifest,
    study_id: &str,
) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(rel))
        .map_err(|e| Error::load(study_id, format!("missing file {rel}: {e}")))?;
    match manifest.checksums.get(rel) {
        Some(expect) if *expect == sha256_hex(&bytes) => Ok(bytes),
        Some(_) => Err(Error::load(study_id, format!("checksum mismatch for {rel}"))),
        None => Err(Error::load(study_id, format!("file {rel} not in manifest"))),
    }
}

/// Read the manifest alone.
pub fn load_manifest(dir: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CohortManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Load a persisted cohort, verifying every checksum.
pub fn load_cohort(dir: &Path) -> Result<(Vec<StudyRecord>, Vocabulary, CohortManifest)> {
    let manifest = load_manifest(dir)?;
    let vocab_bytes = read_checked(dir, "vocab.json", &manifest, "<cohort>")?;
    let vocab = Vocabulary::from_json(std::str::from_utf8(&vocab_bytes).map_err(|e| {
        Error::manifest(format!("vocab.json not utf-8: {e}"))
    })?)?;

    let mut records = Vec::with_capacity(manifest.studies.len());
    for desc in &manifest.studies {
        let sid = &desc.study_id;
        let sidecar_bytes = read_checked(dir, &format!("{}/study.json", desc.dir), &manifest, sid)?;
        let sidecar: StudySidecar = serde_json::from_str(
            std::str::from_utf8(&sidecar_bytes)
                .map_err(|e| Error::load(sid, format!("study.json not utf-8: {e}")))?,
        )
        .map_err(|e| Error::load(sid, format!("study.json parse: {e}")))?;

        let mut sequences = Vec::with_capacity(sidecar.sequences.len());
        for s in &sidecar.sequences {
            let bytes = read_checked(dir, &s.file, &manifest, sid)?;
            let data = volume_from_bytes(&bytes, s.shape)
                .map_err(|e| Error::load(sid, e.to_string()))?;
            sequences.push((
                s.meta.clone(),
                VoxelVolume {
                    data,
                    voxel_spacing: s.voxel_spacing,
                },
            ));
        }
        let mut lesion_masks = Vec::with_capacity(sidecar.masks.len());
        for m in &sidecar.masks {
            let bytes = read_checked(dir, &m.file, &manifest, sid)?;
            let mask = mask_from_bytes(&bytes, manifest.canonical_shape)
                .map_err(|e| Error::load(sid, e.to_string()))?;
            lesion_masks.push((m.dx, mask));
        }
        let report_text_bytes = read_checked(dir, &sidecar.report_file, &manifest, sid)?;
        let report_text = String::from_utf8(report_text_bytes)
            .map_err(|e| Error::load(sid, format!("report not utf-8: {e}")))?;
        let full_bytes = read_checked(dir, &sidecar.full_report_file, &manifest, sid)?;
        let full_text = String::from_utf8(full_bytes)
            .map_err(|e| Error::load(sid, format!("full report not utf-8: {e}")))?;

        let record = StudyRecord {
            study_id: sidecar.study_id,
            patient_id: sidecar.patient_id,
            study_name: sidecar.study_name,
            sequences,
            report: crate::cohort::types::ReportDoc {
                token_ids: vocab.encode_framed(&report_text),
                text: report_text,
            },
            full_report: crate::cohort::types::ReportDoc {
                token_ids: vocab.encode_framed(&full_text),
                text: full_text,
            },
            labels: sidecar.labels,
            subgroup: sidecar.subgroup,
            split: sidecar.split,
            lesion_masks,
        };
        record
            .validate()
            .map_err(|e| Error::load(sid, e.to_string()))?;
        records.push(record);
    }
    Ok((records, vocab, manifest))
}
