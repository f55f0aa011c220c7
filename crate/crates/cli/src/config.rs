//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::Deserialize;

use recur_core::eval::{CvSettings, Pooling};
use recur_core::features::{ConceptEncoding, Variant, VariantConfig};
use recur_core::pipeline::ContextOptions;
use recur_core::svm::SvmParams;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub notes: Option<PathBuf>,
    pub patients: Option<PathBuf>,
    /// Defaults to the bundled lexicon.
    pub lexicon: Option<PathBuf>,
    /// Defaults to the bundled cue list.
    pub cues: Option<PathBuf>,
    pub medications: Option<PathBuf>,
    pub radiation_sites: Option<PathBuf>,
    /// Two-column CSV of paired annotations for the agreement statistic.
    pub annotations: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    /// Defaults to `<out>/sentences.jsonl`.
    pub sentences: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSection {
    pub sentence_cues: bool,
    pub negex: bool,
    /// Notes dated later are dropped. No censoring when absent.
    pub censor_date: Option<NaiveDate>,
    pub min_score: f64,
}

impl Default for ContextSection {
    fn default() -> Self {
        ContextSection {
            sentence_cues: true,
            negex: true,
            censor_date: None,
            min_score: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSection {
    pub variant: String,
    pub chi2_keep_fraction: f64,
    pub concept_encoding: ConceptEncoding,
}

impl Default for VariantSection {
    fn default() -> Self {
        VariantSection {
            variant: Variant::FilteredPlusClinical.to_string(),
            chi2_keep_fraction: 0.05,
            concept_encoding: ConceptEncoding::Counts,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSection {
    #[serde(alias = "C")]
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub top_k: usize,
}

impl Default for LearnerSection {
    fn default() -> Self {
        let p = SvmParams::default();
        LearnerSection {
            c: p.c,
            tol: p.tol,
            max_epochs: p.max_epochs,
            seed: p.seed,
            top_k: 15,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub replicates: usize,
    pub base_seed: u64,
    pub pooling: Pooling,
    pub cross_validation: bool,
    /// Also train on a stratified split and score the held-out part.
    pub holdout: bool,
    pub ratio: f64,
    /// Variants whose replicate AUCs are compared with the main variant.
    pub compare: Vec<String>,
    pub welch: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: 5,
            replicates: 20,
            base_seed: 0,
            pooling: Pooling::Pooled,
            cross_validation: true,
            holdout: false,
            ratio: 0.7,
            compare: Vec::new(),
            welch: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub context: ContextSection,
    pub variant: VariantSection,
    pub learner: LearnerSection,
    pub eval: EvalSection,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for field in [
            &mut p.notes,
            &mut p.patients,
            &mut p.lexicon,
            &mut p.cues,
            &mut p.medications,
            &mut p.radiation_sites,
            &mut p.annotations,
            &mut p.generator,
            &mut p.sentences,
            &mut p.out,
        ] {
            resolve(base, field);
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn sentences_path(&self) -> PathBuf {
        self.paths
            .sentences
            .clone()
            .unwrap_or_else(|| self.out_dir().join("sentences.jsonl"))
    }

    pub fn censor_date(&self) -> NaiveDate {
        self.context.censor_date.unwrap_or(NaiveDate::MAX)
    }

    pub fn context_options(&self) -> ContextOptions {
        ContextOptions {
            sentence_cues: self.context.sentence_cues,
            negex: self.context.negex,
        }
    }

    pub fn variant_config(&self) -> Result<VariantConfig> {
        self.variant_config_for(&self.variant.variant)
    }

    pub fn variant_config_for(&self, name: &str) -> Result<VariantConfig> {
        let variant: Variant = name.parse()?;
        let cfg = VariantConfig {
            variant,
            chi2_keep_fraction: self.variant.chi2_keep_fraction,
            concept_encoding: self.variant.concept_encoding,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn svm_params(&self) -> Result<SvmParams> {
        let l = &self.learner;
        if !(l.c > 0.0 && l.c.is_finite()) {
            bail!("learner.c must be positive, got {}", l.c);
        }
        if !(l.tol > 0.0) {
            bail!("learner.tol must be positive, got {}", l.tol);
        }
        Ok(SvmParams {
            c: l.c,
            tol: l.tol,
            max_epochs: l.max_epochs,
            seed: l.seed,
        })
    }

    pub fn cv_settings(&self) -> Result<CvSettings> {
        Ok(CvSettings {
            k: self.eval.k,
            replicates: self.eval.replicates,
            base_seed: self.eval.base_seed,
            svm: self.svm_params()?,
            pooling: self.eval.pooling,
        })
    }
}

/// Fails unless `path` is set and exists.
pub fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    match path {
        None => bail!("config is missing paths.{what}"),
        Some(p) if !p.exists() => bail!("paths.{what} does not exist: {}", p.display()),
        Some(p) => Ok(p),
    }
}

/// Fails if `path` is set but missing.
pub fn optional<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<Option<&'a Path>> {
    match path {
        Some(p) if !p.exists() => bail!("paths.{what} does not exist: {}", p.display()),
        Some(p) => Ok(Some(p)),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_parses() {
        let text = include_str!("../config.example.toml");
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.eval.replicates, 20);
        assert!(cfg.variant_config().is_ok());
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[paths]\nnotes = \"n.jsonl\"\nout = \"/abs/out\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.notes.unwrap(), dir.path().join("n.jsonl"));
        assert_eq!(cfg.paths.out.unwrap(), PathBuf::from("/abs/out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[learner]\ngamma = \"auto\"\n").is_err());
    }
}
