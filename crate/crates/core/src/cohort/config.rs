//! Cohort generation configuration, loadable from a flat TOML file.

use serde::{Deserialize, Serialize};

use crate::cohort::types::Priority;
use crate::error::{Error, Result};

/// Everything `generate_cohort` needs besides the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_studies: usize,
    /// Canonical anatomy shape; stored sequence volumes are axis
    /// permutations of it.
    pub volume_shape: [usize; 3],
    pub n_diagnoses: usize,
    pub sequences_min: usize,
    pub sequences_max: usize,
    pub prospective_fraction: f64,
    /// Probability that a patient contributes two studies.
    pub two_study_patient_fraction: f64,
    /// Probabilities for a study carrying 0, 1, or 2 positive diagnoses.
    pub positive_count_weights: [f64; 3],
    /// Relative sampling weight per diagnosis (cycled if shorter than
    /// n_diagnoses).
    pub diagnosis_weights: Vec<f64>,
    /// Intensity a lesion voxel sits above the local background mean.
    pub lesion_contrast: f64,
    /// Approximate lesion radius in voxels.
    pub lesion_radius: f64,
    /// Uniform noise amplitude outside the head region.
    pub background_noise: f64,
    /// Priority assigned to each diagnosis index (cycled if shorter).
    pub priority_mapping: Vec<Priority>,
    pub subgroup_sex: Vec<f64>,
    pub subgroup_age: Vec<f64>,
    pub subgroup_race: Vec<f64>,
    pub subgroup_insurance: Vec<f64>,
    pub subgroup_scanner: Vec<f64>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_studies: 200,
            volume_shape: [64, 64, 16],
            n_diagnoses: 12,
            sequences_min: 2,
            sequences_max: 4,
            prospective_fraction: 0.2,
            two_study_patient_fraction: 0.2,
            positive_count_weights: [0.15, 0.45, 0.40],
            diagnosis_weights: vec![1.5, 1.5, 1.5, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.8, 0.8],
            lesion_contrast: 0.30,
            lesion_radius: 5.0,
            background_noise: 0.01,
            priority_mapping: vec![
                Priority::Normal,
                Priority::Normal,
                Priority::Normal,
                Priority::Normal,
                Priority::Medium,
                Priority::Medium,
                Priority::Medium,
                Priority::Medium,
                Priority::Medium,
                Priority::High,
                Priority::High,
                Priority::High,
            ],
            subgroup_sex: vec![0.5, 0.5],
            subgroup_age: vec![0.3, 0.4, 0.3],
            subgroup_race: vec![0.4, 0.3, 0.2, 0.1],
            subgroup_insurance: vec![0.55, 0.45],
            subgroup_scanner: vec![0.4, 0.35, 0.25],
        }
    }
}

impl CohortConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CohortConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("cohort config parse failure: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Priority of one diagnosis index under the (cycled) mapping.
    pub fn priority_of(&self, dx: usize) -> Priority {
        self.priority_mapping[dx % self.priority_mapping.len()]
    }

    /// Full per-diagnosis priority table of length n_diagnoses.
    pub fn priority_table(&self) -> Vec<Priority> {
        (0..self.n_diagnoses).map(|d| self.priority_of(d)).collect()
    }

    pub fn diagnosis_weight(&self, dx: usize) -> f64 {
        self.diagnosis_weights[dx % self.diagnosis_weights.len()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_studies == 0 {
            return Err(Error::config("n_studies must be positive"));
        }
        if self.n_diagnoses == 0 {
            return Err(Error::config("n_diagnoses must be positive"));
        }
        if self.volume_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("volume_shape dims must be positive"));
        }
        if self.sequences_min < 2 || self.sequences_max < self.sequences_min {
            return Err(Error::config(
                "sequence counts must satisfy 2 <= min <= max",
            ));
        }
        if !(0.0..=1.0).contains(&self.prospective_fraction) {
            return Err(Error::config("prospective_fraction must be in [0,1]"));
        }
        if self.lesion_contrast <= 0.0 || self.lesion_contrast > 0.5 {
            return Err(Error::config("lesion_contrast must be in (0, 0.5]"));
        }
        for (name, dist) in [
            ("subgroup_sex", &self.subgroup_sex),
            ("subgroup_age", &self.subgroup_age),
            ("subgroup_race", &self.subgroup_race),
            ("subgroup_insurance", &self.subgroup_insurance),
            ("subgroup_scanner", &self.subgroup_scanner),
        ] {
            if dist.is_empty() || dist.iter().any(|&p| p < 0.0) {
                return Err(Error::config(format!("{name} must be non-negative weights")));
            }
            if dist.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config(format!("{name} weights sum to zero")));
            }
        }
        if self.positive_count_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("positive_count_weights sum to zero"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        CohortConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = CohortConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = CohortConfig::from_toml(&text).unwrap();
        assert_eq!(back.n_studies, cfg.n_studies);
        assert_eq!(back.priority_mapping, cfg.priority_mapping);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = CohortConfig::from_toml("n_studies = 12\nn_diagnoses = 4\n").unwrap();
        assert_eq!(cfg.n_studies, 12);
        assert_eq!(cfg.n_diagnoses, 4);
        assert_eq!(cfg.volume_shape, [64, 64, 16]);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(CohortConfig::from_toml("n_studies = 0").is_err());
        assert!(CohortConfig::from_toml("prospective_fraction = 1.5").is_err());
        assert!(CohortConfig::from_toml("sequences_min = 1").is_err());
    }

    #[test]
    fn default_priority_mapping_bands() {
        let cfg = CohortConfig::default();
        assert_eq!(cfg.priority_of(0), Priority::Normal);
        assert_eq!(cfg.priority_of(3), Priority::Normal);
        assert_eq!(cfg.priority_of(4), Priority::Medium);
        assert_eq!(cfg.priority_of(8), Priority::Medium);
        assert_eq!(cfg.priority_of(9), Priority::High);
        assert_eq!(cfg.priority_of(11), Priority::High);
    }
}
