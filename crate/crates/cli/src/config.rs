//! Run configuration: JSON file, then environment and flag overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fqninfer::backend::remote::RemoteConfig;
use fqninfer::backend::NgramConfig;
use fqninfer::eval::{AliasTable, HarnessConfig, ReportBins, DEFAULT_SEEN_THRESHOLD};
use fqninfer::infer::{Aggregate, PromptSetting, SpanSearchConfig};
use fqninfer::promptgen::{MaskStrategy, PromptConfig};
use fqninfer::tokenizer::VocabConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Context lines on each side of the focus line.
    pub radius: usize,
    pub window: usize,
    pub mask: MaskStrategy,
    pub span_min: usize,
    pub span_max: usize,
    pub aggregate: Aggregate,
    pub top_k: usize,
    pub setting: PromptSetting,
    pub seed: u64,
    pub threshold: f64,
    pub vocab: Option<PathBuf>,
    pub vocab_config: VocabConfig,
    /// `ngram:<model>`, `remote:<url>` or `scripted:<fixture>`.
    pub backend: Option<String>,
    pub eval_variants: bool,
    pub ngram: NgramConfig,
    pub remote: RemoteConfig,
    pub bins: ReportBins,
    pub aliases: Option<AliasTable>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let span = SpanSearchConfig::default();
        let prompt = PromptConfig::default();
        Self {
            radius: prompt.radius,
            window: prompt.window,
            mask: prompt.strategy,
            span_min: span.min_len,
            span_max: span.max_len,
            aggregate: span.aggregate,
            top_k: span.top_k,
            setting: span.setting,
            seed: 0,
            threshold: DEFAULT_SEEN_THRESHOLD,
            vocab: None,
            vocab_config: VocabConfig::default(),
            backend: None,
            eval_variants: false,
            ngram: NgramConfig::default(),
            remote: RemoteConfig::default(),
            bins: ReportBins::default(),
            aliases: None,
        }
    }
}

/// Values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<String>,
    pub vocab: Option<PathBuf>,
    pub setting: Option<PromptSetting>,
    pub threshold: Option<f64>,
}

impl RunConfig {
    /// Parse a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(v) = &cfg.vocab {
            cfg.vocab = Some(base.join(v));
        }
        if let Some(b) = &cfg.backend {
            cfg.backend = Some(BackendSpec::from_str(b)?.relative_to(base).to_string());
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(b) = &o.backend {
            self.backend = Some(b.clone());
        }
        if let Some(v) = &o.vocab {
            self.vocab = Some(v.clone());
        }
        if let Some(s) = o.setting {
            self.setting = s;
        }
        if let Some(t) = o.threshold {
            self.threshold = t;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        if self.span_min == 0 || self.span_min > self.span_max {
            return bad(format!("span range [{}, {}] is empty or starts at 0", self.span_min, self.span_max));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        self.mask.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.ngram.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(v) = &self.vocab {
            if !v.is_file() {
                return bad(format!("vocabulary file {} does not exist", v.display()));
            }
        }
        if let Some(b) = &self.backend {
            BackendSpec::from_str(b)?.check()?;
        }
        Ok(())
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            radius: self.radius,
            strategy: self.mask,
            window: self.window,
            seed: self.seed,
        }
    }

    pub fn search_config(&self) -> SpanSearchConfig {
        SpanSearchConfig {
            min_len: self.span_min,
            max_len: self.span_max,
            aggregate: self.aggregate,
            window: self.window,
            radius: self.radius,
            top_k: self.top_k,
            setting: self.setting,
            parallel: true,
        }
    }

    pub fn harness_config(&self) -> HarnessConfig {
        HarnessConfig {
            search: self.search_config(),
            eval_variants: self.eval_variants,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Ngram(PathBuf),
    Remote(String),
    Scripted(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("backend {s:?} is not of the form kind:argument")))?;
        if arg.is_empty() {
            return Err(CliError::Config(format!("backend {s:?} has an empty argument")));
        }
        match kind {
            "ngram" => Ok(Self::Ngram(arg.into())),
            "remote" => Ok(Self::Remote(arg.into())),
            "scripted" => Ok(Self::Scripted(arg.into())),
            _ => Err(CliError::Config(format!("unknown backend kind {kind:?}; expected ngram, remote or scripted"))),
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Ngram(p) => write!(f, "ngram:{}", p.display()),
            Self::Remote(u) => write!(f, "remote:{u}"),
            Self::Scripted(p) => write!(f, "scripted:{}", p.display()),
        }
    }
}

impl BackendSpec {
    fn relative_to(self, base: &Path) -> Self {
        match self {
            Self::Ngram(p) => Self::Ngram(base.join(p)),
            Self::Scripted(p) => Self::Scripted(base.join(p)),
            r => r,
        }
    }

    fn check(&self) -> Result<(), CliError> {
        match self {
            Self::Ngram(p) | Self::Scripted(p) if !p.is_file() => {
                Err(CliError::Config(format!("backend file {} does not exist", p.display())))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::default().top_k, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = serde_json::from_str::<RunConfig>(r#"{"radius": 2, "radious": 3}"#);
        assert!(e.is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 9, "mask": {"kind": "random", "ratio": 0.5}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.mask, MaskStrategy::Random { ratio: 0.5 });
        assert_eq!(c.span_max, 69);
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig {
            seed: 1,
            ..Default::default()
        };
        c.apply(&Overrides {
            seed: Some(7),
            setting: Some(PromptSetting::AllUnknown),
            ..Default::default()
        });
        assert_eq!((c.seed, c.setting), (7, PromptSetting::AllUnknown));
        assert_eq!(c.threshold, 0.35);
    }

    #[test]
    fn backend_specs() {
        assert_eq!(BackendSpec::from_str("ngram:m.bin").unwrap(), BackendSpec::Ngram("m.bin".into()));
        assert_eq!(
            BackendSpec::from_str("remote:http://h:1").unwrap(),
            BackendSpec::Remote("http://h:1".into())
        );
        assert!(BackendSpec::from_str("ngram:").is_err());
        assert!(BackendSpec::from_str("bert").is_err());
        assert!(BackendSpec::from_str("gpt:x").is_err());
        let s = BackendSpec::from_str("scripted:a.json").unwrap().relative_to(Path::new("/cfg"));
        assert_eq!(s.to_string(), "scripted:/cfg/a.json");
    }

    #[test]
    fn invalid_values_fail_validation() {
        for c in [
            RunConfig { span_min: 5, span_max: 4, ..Default::default() },
            RunConfig { threshold: 1.0, ..Default::default() },
            RunConfig { mask: MaskStrategy::Random { ratio: 0.0 }, ..Default::default() },
            RunConfig { vocab: Some("/nonexistent/vocab.txt".into()), ..Default::default() },
            RunConfig { backend: Some("ngram:/nonexistent/m.bin".into()), ..Default::default() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..Default::default() };
        assert_eq!(a.digest(), RunConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
