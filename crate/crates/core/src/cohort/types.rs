//! Core cohort data model: volumes, sequence metadata, study records,
//! labels, subgroups, and the on-disk manifest.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3-d intensity volume with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub data: Array3<f64>,
    /// Voxel spacing in mm; metadata only.
    pub voxel_spacing: [f64; 3],
}

impl VoxelVolume {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Check the intensity/finiteness invariant.
    pub fn validate(&self) -> Result<()> {
        for &v in self.data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::shape(format!(
                    "voxel intensity {v} outside [0,1] or non-finite"
                )));
            }
        }
        Ok(())
    }
}

/// Acquisition plane of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];
}

/// Signed axis-order code describing how the stored array maps onto the
/// canonical anatomy axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrientationCode {
    RAS,
    LAS,
    RAI,
    LPS,
}

impl OrientationCode {
    pub const ALL: [OrientationCode; 4] = [
        OrientationCode::RAS,
        OrientationCode::LAS,
        OrientationCode::RAI,
        OrientationCode::LPS,
    ];

    /// Per-axis flips relative to the canonical anatomy array.
    pub fn flips(self) -> [bool; 3] {
        match self {
            OrientationCode::RAS => [false, false, false],
            OrientationCode::LAS => [true, false, false],
            OrientationCode::RAI => [false, false, true],
            OrientationCode::LPS => [true, true, false],
        }
    }
}

/// Axis permutation + flips mapping canonical anatomy coordinates into a
/// stored sequence volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisTransform {
    /// `perm[i]` = canonical axis stored at sequence axis i.
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl AxisTransform {
    pub fn identity() -> Self {
        Self {
            perm: [0, 1, 2],
            flip: [false; 3],
        }
    }

    /// Apply to a canonical-space array (permute axes, then flip).
    pub fn apply(&self, canonical: &Array3<f64>) -> Array3<f64> {
        let mut v = canonical.view().permuted_axes(self.perm);
        for (axis, &f) in self.flip.iter().enumerate() {
            if f {
                v.invert_axis(ndarray::Axis(axis));
            }
        }
        v.to_owned()
    }

    /// Apply to a boolean mask in canonical space.
    pub fn apply_mask(&self, canonical: &Array3<bool>) -> Array3<bool> {
        let mut v = canonical.view().permuted_axes(self.perm);
        for (axis, &f) in self.flip.iter().enumerate() {
            if f {
                v.invert_axis(ndarray::Axis(axis));
            }
        }
        v.to_owned()
    }

    pub fn transformed_shape(&self, canonical_shape: [usize; 3]) -> [usize; 3] {
        [
            canonical_shape[self.perm[0]],
            canonical_shape[self.perm[1]],
            canonical_shape[self.perm[2]],
        ]
    }
}

/// How a plane reorders canonical axes into the stored array.
pub fn plane_permutation(plane: Plane) -> [usize; 3] {
    match plane {
        Plane::Axial => [0, 1, 2],
        Plane::Coronal => [0, 2, 1],
        Plane::Sagittal => [2, 0, 1],
    }
}

/// Full canonical->stored transform for a sequence.
pub fn sequence_transform(plane: Plane, code: OrientationCode) -> AxisTransform {
    AxisTransform {
        perm: plane_permutation(plane),
        flip: code.flips(),
    }
}

/// Metadata attached to one acquisition within a study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub sequence_name: String,
    pub plane: Plane,
    pub orientation_code: OrientationCode,
}

/// Referral priority, ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    Normal = 0,
    Medium = 1,
    High = 2,
}

impl Priority {
    pub fn as_index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Priority::Normal),
            1 => Ok(Priority::Medium),
            2 => Ok(Priority::High),
            _ => Err(Error::config(format!("priority index {i} out of range"))),
        }
    }
}

/// Multi-label diagnosis bits plus the derived priority.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub bits: Vec<u8>,
    pub priority: Priority,
}

impl LabelVector {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i)
    }

    pub fn n_positive(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }
}

/// Max priority over positive bits; all-negative studies are normal.
pub fn diagnosis_to_priority(bits: &[u8], mapping: &[Priority]) -> Priority {
    assert_eq!(bits.len(), mapping.len(), "mapping must cover all diagnoses");
    bits.iter()
        .zip(mapping)
        .filter(|(&b, _)| b != 0)
        .map(|(_, &p)| p)
        .max()
        .unwrap_or(Priority::Normal)
}

/// Demographic / acquisition attributes used by the fairness analyses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupAttrs {
    pub sex: String,
    pub age_band: String,
    pub race_code: String,
    pub insurance_code: String,
    pub scanner_code: String,
}

impl SubgroupAttrs {
    pub const ATTRIBUTES: [&'static str; 5] =
        ["sex", "age_band", "race_code", "insurance_code", "scanner_code"];

    pub fn get(&self, attribute: &str) -> Option<&str> {
        match attribute {
            "sex" => Some(&self.sex),
            "age_band" => Some(&self.age_band),
            "race_code" => Some(&self.race_code),
            "insurance_code" => Some(&self.insurance_code),
            "scanner_code" => Some(&self.scanner_code),
            _ => None,
        }
    }
}

/// Cohort split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Retrospective,
    Prospective,
}

/// A report: rendered text plus its vocabulary encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub text: String,
    pub token_ids: Vec<usize>,
}

/// One imaging study: sequences, report, labels, demographics.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub study_name: String,
    pub sequences: Vec<(SequenceMeta, VoxelVolume)>,
    pub report: ReportDoc,
    /// Boilerplate-padded variant of the report (same findings plus
    /// distractor lines); used by the clustering comparison.
    pub full_report: ReportDoc,
    pub labels: LabelVector,
    pub subgroup: SubgroupAttrs,
    pub split: Split,
    /// Ground-truth lesion masks in canonical anatomy coordinates, one per
    /// positive diagnosis: (diagnosis index, mask).
    pub lesion_masks: Vec<(usize, Array3<bool>)>,
}

impl StudyRecord {
    pub fn validate(&self) -> Result<()> {
        if self.sequences.len() < 2 {
            return Err(Error::load(
                &self.study_id,
                format!("{} sequences; studies need at least 2", self.sequences.len()),
            ));
        }
        for (_, vol) in &self.sequences {
            vol.validate()
                .map_err(|e| Error::load(&self.study_id, e.to_string()))?;
        }
        let positive: Vec<usize> = self.labels.positives().collect();
        let masked: Vec<usize> = self.lesion_masks.iter().map(|(d, _)| *d).collect();
        if positive != masked {
            return Err(Error::load(
                &self.study_id,
                "lesion masks do not match positive label bits",
            ));
        }
        Ok(())
    }

    /// Transform of each sequence from canonical anatomy space.
    pub fn sequence_transforms(&self) -> Vec<AxisTransform> {
        self.sequences
            .iter()
            .map(|(m, _)| sequence_transform(m.plane, m.orientation_code))
            .collect()
    }
}

/// Study descriptor inside the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyDescriptor {
    pub study_id: String,
    pub patient_id: String,
    pub dir: String,
    pub n_sequences: usize,
    pub label_bits: Vec<u8>,
    pub priority: Priority,
    pub subgroup: SubgroupAttrs,
    pub split: Split,
}

/// Top-level index of a generated cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub version: u32,
    pub seed: u64,
    pub n_diagnoses: usize,
    pub canonical_shape: [usize; 3],
    pub studies: Vec<StudyDescriptor>,
    /// file path -> sha256 hex digest, for load-time integrity checks.
    pub checksums: std::collections::BTreeMap<String, String>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::manifest(format!(
                "unknown manifest version {}",
                self.version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.studies {
            if !seen.insert(&s.study_id) {
                return Err(Error::manifest(format!(
                    "duplicate study_id `{}`",
                    s.study_id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priority_is_max_over_positive_bits() {
        let mapping = vec![
            Priority::Normal,
            Priority::Medium,
            Priority::High,
            Priority::Medium,
        ];
        assert_eq!(diagnosis_to_priority(&[0, 0, 0, 0], &mapping), Priority::Normal);
        assert_eq!(diagnosis_to_priority(&[1, 0, 0, 0], &mapping), Priority::Normal);
        assert_eq!(diagnosis_to_priority(&[0, 1, 0, 1], &mapping), Priority::Medium);
        assert_eq!(diagnosis_to_priority(&[1, 0, 1, 1], &mapping), Priority::High);
    }

    #[test]
    fn axis_transform_round_trips_shapes() {
        let t = sequence_transform(Plane::Coronal, OrientationCode::LAS);
        assert_eq!(t.transformed_shape([64, 64, 16]), [64, 16, 64]);
        let t = sequence_transform(Plane::Sagittal, OrientationCode::RAS);
        assert_eq!(t.transformed_shape([64, 64, 16]), [16, 64, 64]);
    }

    #[test]
    fn axis_transform_moves_voxels_consistently() {
        let mut c = Array3::<f64>::zeros((4, 3, 2));
        c[[1, 2, 0]] = 1.0;
        let t = sequence_transform(Plane::Coronal, OrientationCode::RAS);
        let v = t.apply(&c);
        // coronal permutation (0,2,1): stored [i,k,j] = canonical [i,j,k]
        assert_eq!(v.shape(), &[4, 2, 3]);
        assert_eq!(v[[1, 0, 2]], 1.0);
    }

    #[test]
    fn flips_invert_axes() {
        let mut c = Array3::<f64>::zeros((2, 2, 2));
        c[[0, 0, 0]] = 1.0;
        let t = sequence_transform(Plane::Axial, OrientationCode::LAS);
        let v = t.apply(&c);
        assert_eq!(v[[1, 0, 0]], 1.0);
    }

    #[test]
    fn duplicate_study_ids_rejected() {
        let d = StudyDescriptor {
            study_id: "s1".into(),
            patient_id: "p1".into(),
            dir: "s1".into(),
            n_sequences: 2,
            label_bits: vec![0],
            priority: Priority::Normal,
            subgroup: SubgroupAttrs {
                sex: "f".into(),
                age_band: "40-65".into(),
                race_code: "a".into(),
                insurance_code: "public".into(),
                scanner_code: "s1".into(),
            },
            split: Split::Retrospective,
        };
        let m = CohortManifest {
            version: MANIFEST_VERSION,
            seed: 1,
            n_diagnoses: 1,
            canonical_shape: [8, 8, 8],
            studies: vec![d.clone(), d],
            checksums: Default::default(),
        };
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    }
}
