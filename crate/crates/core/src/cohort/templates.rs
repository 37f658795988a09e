//! Report templates, diagnosis/zone lexicon, and name pools for the
//! synthetic cohort. Every phrase that can ever appear in a rendered
//! report is enumerable here, which lets the shared vocabulary be built
//! up front.

use rand::Rng as _;

use crate::cohort::types::ReportDoc;
use crate::rng::Rng;
use crate::text::vocab::Vocabulary;

/// Line emitted when no diagnosis bit is set.
pub const NO_FINDINGS: &str = "No acute findings.";

/// Anatomical site keyword per diagnosis index.
pub const ZONES: [&str; 12] = [
    "right frontal",
    "left frontal",
    "right parietal",
    "left parietal",
    "right temporal",
    "left temporal",
    "right occipital",
    "left occipital",
    "deep white matter",
    "basal ganglia",
    "cerebellar",
    "brainstem",
];

/// Short diagnosis identifiers (used in summaries and figure labels).
pub const DIAGNOSIS_NAMES: [&str; 12] = [
    "sinus inflammation",
    "chronic lacune",
    "white matter change",
    "cortical atrophy",
    "demyelinating lesion",
    "meningioma",
    "pituitary adenoma",
    "cavernous malformation",
    "subdural collection",
    "acute infarct",
    "intracranial hemorrhage",
    "malignant mass",
];

/// Finding phrasings per diagnosis; `{zone}` is replaced by the site.
const FINDING_TEMPLATES: [[&str; 3]; 12] = [
    [
        "Mild mucosal sinus inflammation adjacent to the {zone} region.",
        "Mild inflammatory sinus disease is noted near the {zone} region.",
        "Minimal sinus inflammation seen along the {zone} convexity.",
    ],
    [
        "Small chronic lacune in the {zone} region.",
        "A tiny chronic lacunar cavity is present in the {zone} region.",
        "Chronic lacune identified within the {zone} area.",
    ],
    [
        "Scattered white matter change in the {zone} region.",
        "Mild chronic white matter change involving the {zone} region.",
        "Nonspecific white matter change is seen in the {zone} area.",
    ],
    [
        "Cortical atrophy most pronounced in the {zone} region.",
        "Volume loss with cortical atrophy over the {zone} region.",
        "Atrophy of the cortex noted in the {zone} area.",
    ],
    [
        "Focal demyelinating lesion in the {zone} region.",
        "A demyelinating plaque is identified in the {zone} region.",
        "Demyelinating lesion seen within the {zone} white matter.",
    ],
    [
        "Dural based meningioma along the {zone} convexity.",
        "Extra axial meningioma arising from the {zone} dura.",
        "A meningioma is present along the {zone} region.",
    ],
    [
        "Pituitary adenoma with extension toward the {zone} region.",
        "Sellar pituitary adenoma abutting the {zone} region.",
        "An adenoma of the pituitary is seen near the {zone} area.",
    ],
    [
        "Cavernous malformation in the {zone} region.",
        "A cavernous malformation with hemosiderin rim in the {zone} region.",
        "Cavernous malformation identified within the {zone} area.",
    ],
    [
        "Subdural collection overlying the {zone} region.",
        "A thin subdural collection is present over the {zone} convexity.",
        "Chronic subdural collection along the {zone} region.",
    ],
    [
        "Acute infarct with restricted diffusion in the {zone} region.",
        "Acute ischemic infarct involving the {zone} territory.",
        "Restricted diffusion compatible with acute infarct in the {zone} region.",
    ],
    [
        "Acute intracranial hemorrhage centered in the {zone} region.",
        "Intracranial hemorrhage with surrounding edema in the {zone} region.",
        "Hemorrhage is identified within the {zone} area.",
    ],
    [
        "Malignant mass with surrounding edema in the {zone} region.",
        "An enhancing malignant mass occupies the {zone} region.",
        "Malignant mass lesion with mass effect in the {zone} area.",
    ],
];

/// Distractor lines for the boilerplate-padded "full" report variant.
const BOILERPLATE: [&str; 10] = [
    "Technique: multiplanar multisequence imaging of the brain.",
    "Comparison: no prior studies available.",
    "Clinical history: follow up examination.",
    "The visualized orbits are unremarkable.",
    "The major intracranial flow voids are preserved.",
    "The ventricles are normal in size and configuration.",
    "No midline shift is present.",
    "The craniocervical junction is within normal limits.",
    "The visualized paranasal sinuses are otherwise clear.",
    "The calvarium is intact.",
];

/// Pool of study names; distinct entries stay pairwise distinct under
/// normalization.
pub const STUDY_NAMES: [&str; 5] = [
    "MRI BRAIN WO CONTRAST",
    "MRI BRAIN W AND WO CONTRAST",
    "MR HEAD ROUTINE",
    "MRI BRAIN TUMOR PROTOCOL",
    "MR BRAIN SEIZURE PROTOCOL",
];

/// Sequence type tags combined with planes to form sequence names.
pub const SEQUENCE_TYPES: [&str; 5] = ["T1", "T1 POST", "T2", "FLAIR", "DWI"];
pub const PLANE_TAGS: [&str; 3] = ["AX", "COR", "SAG"];

/// Variant suffix used when n_diagnoses exceeds the built-in table.
fn variant_suffix(dx: usize) -> String {
    let round = dx / FINDING_TEMPLATES.len();
    if round == 0 {
        String::new()
    } else {
        format!(" variant {round}")
    }
}

/// The finding line for one diagnosis under one phrasing choice.
pub fn finding_line(dx: usize, phrasing: usize) -> String {
    let base = FINDING_TEMPLATES[dx % FINDING_TEMPLATES.len()];
    let zone = ZONES[dx % ZONES.len()];
    let tpl = base[phrasing % base.len()];
    let mut line = tpl.replace("{zone}", zone);
    let suffix = variant_suffix(dx);
    if !suffix.is_empty() {
        let no_dot = line.trim_end_matches('.').to_string();
        line = format!("{no_dot}{suffix}.");
    }
    line
}

/// Human-readable label for a diagnosis index.
pub fn diagnosis_label(dx: usize) -> String {
    let name = DIAGNOSIS_NAMES[dx % DIAGNOSIS_NAMES.len()];
    let suffix = variant_suffix(dx);
    format!("{name}{suffix}")
}

/// Itemized report: one line per positive bit, seed-chosen phrasing.
pub fn render_report(bits: &[u8], seed_rng: &mut Rng, vocab: &Vocabulary) -> ReportDoc {
    let mut lines = Vec::new();
    for (dx, &b) in bits.iter().enumerate() {
        if b != 0 {
            let phrasing = seed_rng.random_range(0..3usize);
            lines.push(finding_line(dx, phrasing));
        }
    }
    if lines.is_empty() {
        lines.push(NO_FINDINGS.to_string());
    }
    let text = lines.join("\n");
    let token_ids = vocab.encode_framed(&text);
    ReportDoc { text, token_ids }
}

/// Full-report variant: the same findings embedded in distractor
/// boilerplate, for the itemized-vs-full clustering comparison.
pub fn render_full_report(itemized: &ReportDoc, seed_rng: &mut Rng, vocab: &Vocabulary) -> ReportDoc {
    let mut head: Vec<&str> = Vec::new();
    let mut tail: Vec<&str> = Vec::new();
    for line in BOILERPLATE {
        match seed_rng.random_range(0..3u8) {
            0 => head.push(line),
            1 => tail.push(line),
            _ => {}
        }
    }
    if head.is_empty() {
        head.push(BOILERPLATE[0]);
    }
    if tail.is_empty() {
        tail.push(BOILERPLATE[5]);
    }
    let mut parts: Vec<String> = head.iter().map(|s| s.to_string()).collect();
    parts.push(itemized.text.clone());
    parts.extend(tail.iter().map(|s| s.to_string()));
    let text = parts.join("\n");
    let token_ids = vocab.encode_framed(&text);
    ReportDoc { text, token_ids }
}

/// Every text fragment the generator can emit, for vocabulary
/// construction.
pub fn full_lexicon(n_diagnoses: usize) -> Vec<String> {
    let mut texts = vec![NO_FINDINGS.to_string()];
    for dx in 0..n_diagnoses {
        for p in 0..3 {
            texts.push(finding_line(dx, p));
        }
        texts.push(diagnosis_label(dx));
    }
    texts.extend(BOILERPLATE.iter().map(|s| s.to_string()));
    texts.extend(STUDY_NAMES.iter().map(|s| s.to_string()));
    for plane in PLANE_TAGS {
        for ty in SEQUENCE_TYPES {
            texts.push(format!("{plane} {ty}"));
        }
    }
    texts
}

/// Vocabulary covering the whole synthetic lexicon.
pub fn build_vocabulary(n_diagnoses: usize) -> Vocabulary {
    let texts = full_lexicon(n_diagnoses);
    Vocabulary::from_corpus(texts.iter().map(|s| s.as_str()))
}
