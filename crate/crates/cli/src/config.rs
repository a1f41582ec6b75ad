//! Sectioned `key = value` settings. Every known key has a default, so a
//! resolved settings map always carries the full configuration and can be
//! written back out as a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use collapse_lab::harness::{Init, LoopConfig, Strategy, TstarRule};
use collapse_lab::probe::ProbeHyper;

use crate::CliError;

const DEFAULTS: &[(&str, &str, &str)] = &[
    ("run", "seed", "0"),
    ("run", "workers", "0"),
    ("run", "format", "csv"),
    ("loop", "strategy", "SYN"),
    ("loop", "generations", "10"),
    ("loop", "budget", "200"),
    ("loop", "dim", "16"),
    ("loop", "classes", "2"),
    ("loop", "rank", "4"),
    ("loop", "sigma", "0.25"),
    ("loop", "separation", "3"),
    ("loop", "generator_rank", "4"),
    ("loop", "variance_floor", "0.000001"),
    ("loop", "mean_shrinkage", "0"),
    ("loop", "covariance_pooling", "0"),
    ("loop", "timesteps", "200"),
    ("loop", "beta_start", "auto"),
    ("loop", "beta_end", "auto"),
    ("loop", "condition_leak", "0"),
    ("loop", "latent_dim", "auto"),
    ("loop", "tstar", "auto"),
    ("loop", "tstar_grid", "20"),
    ("loop", "sims_omega", "0.7"),
    ("loop", "synth_add_real_fraction", "0.3"),
    ("loop", "eval_samples", "1000"),
    ("loop", "reference_samples", "5000"),
    ("loop", "knn_k", "10"),
    ("loop", "ole_batch", "64"),
    ("loop", "ole_batches", "10"),
    ("loop", "init", "fitted"),
    ("loop", "record_timing", "false"),
    ("probe", "learning_rate", "0.1"),
    ("probe", "epochs", "500"),
    ("probe", "l2", "0.0001"),
    ("verify.ole", "d", "64"),
    ("verify.ole", "r", "9"),
    ("verify.ole", "n", "4"),
    ("verify.ole", "trials", "2000"),
    ("verify.ole", "cosines", "0, 0.02, 0.04, 0.06, 0.08, 0.1"),
    ("verify.confidence", "d", "32"),
    ("verify.confidence", "r", "8"),
    ("verify.confidence", "sigmas", "0.5, 1"),
    ("verify.confidence", "theta_points", "7"),
    ("verify.confidence", "trials", "10000"),
    ("verify.lemmas", "cases", "1000"),
    ("verify.lemmas", "chi_trials", "100000"),
    ("scan", "grid_steps", "10"),
    ("scan", "batch_size", "64"),
    ("scan", "batches", "10"),
    ("scan", "labels", "truth"),
    ("metrics", "k", "10"),
];

/// Keys of the informational section written at the top of a manifest.
const MANIFEST_KEYS: &[&str] = &["command", "version", "timestamp", "out"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<(String, String), String>,
}

impl Default for Settings {
    fn default() -> Self {
        let values = DEFAULTS.iter().map(|&(s, k, v)| ((s.to_string(), k.to_string()), v.to_string())).collect();
        Self { values }
    }
}

fn nearest<'a>(word: &str, candidates: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .map(|c| (strsim::levenshtein(word, c), c))
        .filter(|&(d, c)| d <= 3.max(c.len() / 3))
        .min()
        .map(|(_, c)| c)
}

fn sections() -> impl Iterator<Item = &'static str> {
    let mut seen: Vec<&str> = DEFAULTS.iter().map(|d| d.0).collect();
    seen.dedup();
    seen.into_iter()
}

impl Settings {
    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self, CliError> {
        Self::default().overlay(text)
    }

    /// Applies a settings file on top of `self`. All unknown keys are
    /// reported together, each with the closest valid key.
    pub fn overlay(self, text: &str) -> Result<Self, CliError> {
        let mut out = self;
        let mut section: Option<String> = None;
        let mut seen = BTreeMap::new();
        let mut unknown = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = no + 1;
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if name != "manifest" && !sections().any(|s| s == name) {
                    let hint = nearest(name, sections()).map(|s| format!(" (did you mean [{s}]?)")).unwrap_or_default();
                    return Err(CliError::Config(format!("line {at}: unknown section [{name}]{hint}")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {at}: expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = section.as_deref() else {
                return Err(CliError::Config(format!("line {at}: `{key}` appears before any [section]")));
            };
            if value.is_empty() {
                return Err(CliError::Config(format!("line {at}: missing value for {sec}.{key}")));
            }
            if sec == "manifest" {
                if !MANIFEST_KEYS.contains(&key) {
                    unknown.push(format!("manifest.{key}"));
                }
                continue;
            }
            let id = (sec.to_string(), key.to_string());
            if !out.values.contains_key(&id) {
                let hint = nearest(key, DEFAULTS.iter().filter(|d| d.0 == sec).map(|d| d.1))
                    .map(|k| format!(" (did you mean `{k}`?)"))
                    .unwrap_or_default();
                unknown.push(format!("{sec}.{key}{hint}"));
                continue;
            }
            if let Some(first) = seen.insert(id.clone(), at) {
                return Err(CliError::Config(format!("line {at}: {sec}.{key} already set on line {first}")));
            }
            out.values.insert(id, value.to_string());
        }
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        out.check()?;
        Ok(out)
    }

    pub fn get(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no setting {section}.{key}"))
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        let id = (section.to_string(), key.to_string());
        assert!(self.values.contains_key(&id), "no setting {section}.{key}");
        self.values.insert(id, value.into());
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T, CliError> {
        let v = self.get(section, key);
        v.parse().map_err(|_| CliError::Config(format!("{section}.{key}: cannot parse `{v}` as {}", std::any::type_name::<T>())))
    }

    fn optional<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError> {
        if self.get(section, key) == "auto" {
            Ok(None)
        } else {
            self.parsed(section, key).map(Some)
        }
    }

    fn list(&self, section: &str, key: &str) -> Result<Vec<f64>, CliError> {
        self.get(section, key)
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::Config(format!("{section}.{key}: `{}` is not a number", v.trim()))))
            .collect()
    }

    /// Type-checks every key by building each typed view once.
    pub fn check(&self) -> Result<(), CliError> {
        self.seed()?;
        self.workers()?;
        self.svg()?;
        self.strategies()?;
        self.loop_config(Strategy::Syn)?;
        self.ole_bound()?;
        self.confidence_bound()?;
        self.lemmas()?;
        self.scan()?;
        self.metrics_k()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parsed("run", "seed")
    }

    pub fn workers(&self) -> Result<usize, CliError> {
        self.parsed("run", "workers")
    }

    pub fn svg(&self) -> Result<bool, CliError> {
        match self.get("run", "format") {
            "csv" => Ok(false),
            "svg" => Ok(true),
            other => Err(CliError::Config(format!("run.format: expected `csv` or `svg`, got `{other}`"))),
        }
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>, CliError> {
        let raw = self.get("loop", "strategy");
        if raw.eq_ignore_ascii_case("all") {
            return Ok(Strategy::ALL.to_vec());
        }
        raw.split(',').map(|s| s.trim().parse::<Strategy>().map_err(|e| CliError::Config(format!("loop.strategy: {e}")))).collect()
    }

    pub fn probe(&self) -> Result<ProbeHyper, CliError> {
        Ok(ProbeHyper {
            learning_rate: self.parsed("probe", "learning_rate")?,
            epochs: self.parsed("probe", "epochs")?,
            l2: self.parsed("probe", "l2")?,
            seed: self.seed()?,
        })
    }

    pub fn tstar(&self) -> Result<TstarRule, CliError> {
        Ok(match self.optional::<usize>("loop", "tstar")? {
            Some(t) => TstarRule::Fixed(t),
            None => TstarRule::MinRealOle { grid_steps: self.parsed("loop", "tstar_grid")? },
        })
    }

    pub fn loop_config(&self, strategy: Strategy) -> Result<LoopConfig, CliError> {
        let betas = match (self.optional::<f64>("loop", "beta_start")?, self.optional::<f64>("loop", "beta_end")?) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(CliError::Config("loop.beta_start and loop.beta_end must both be set or both be auto".into())),
        };
        let init = match self.get("loop", "init") {
            "fitted" => Init::Fitted,
            "exact" => Init::Exact,
            other => return Err(CliError::Config(format!("loop.init: expected `fitted` or `exact`, got `{other}`"))),
        };
        Ok(LoopConfig {
            strategy,
            generations: self.parsed("loop", "generations")?,
            budget: self.parsed("loop", "budget")?,
            seed: self.seed()?,
            dim: self.parsed("loop", "dim")?,
            classes: self.parsed("loop", "classes")?,
            rank: self.parsed("loop", "rank")?,
            sigma: self.parsed("loop", "sigma")?,
            separation: self.parsed("loop", "separation")?,
            generator_rank: self.parsed("loop", "generator_rank")?,
            variance_floor: self.parsed("loop", "variance_floor")?,
            mean_shrinkage: self.parsed("loop", "mean_shrinkage")?,
            covariance_pooling: self.parsed("loop", "covariance_pooling")?,
            timesteps: self.parsed("loop", "timesteps")?,
            betas,
            condition_leak: self.parsed("loop", "condition_leak")?,
            latent_dim: self.optional("loop", "latent_dim")?,
            tstar: self.tstar()?,
            probe: self.probe()?,
            sims_omega: self.parsed("loop", "sims_omega")?,
            synth_add_real_fraction: self.parsed("loop", "synth_add_real_fraction")?,
            eval_samples: self.parsed("loop", "eval_samples")?,
            reference_samples: self.parsed("loop", "reference_samples")?,
            knn_k: self.parsed("loop", "knn_k")?,
            ole_batch: self.parsed("loop", "ole_batch")?,
            ole_batches: self.parsed("loop", "ole_batches")?,
            init,
            record_timing: self.parsed("loop", "record_timing")?,
        })
    }

    pub fn ole_bound(&self) -> Result<OleBoundSettings, CliError> {
        Ok(OleBoundSettings {
            d: self.parsed("verify.ole", "d")?,
            r: self.parsed("verify.ole", "r")?,
            n: self.parsed("verify.ole", "n")?,
            trials: self.parsed("verify.ole", "trials")?,
            cosines: self.list("verify.ole", "cosines")?,
        })
    }

    pub fn confidence_bound(&self) -> Result<ConfidenceBoundSettings, CliError> {
        Ok(ConfidenceBoundSettings {
            d: self.parsed("verify.confidence", "d")?,
            r: self.parsed("verify.confidence", "r")?,
            sigmas: self.list("verify.confidence", "sigmas")?,
            theta_points: self.parsed("verify.confidence", "theta_points")?,
            trials: self.parsed("verify.confidence", "trials")?,
        })
    }

    pub fn lemmas(&self) -> Result<(usize, usize), CliError> {
        Ok((self.parsed("verify.lemmas", "cases")?, self.parsed("verify.lemmas", "chi_trials")?))
    }

    pub fn scan(&self) -> Result<ScanOptions, CliError> {
        let kmeans = match self.get("scan", "labels") {
            "truth" => false,
            "kmeans" => true,
            other => return Err(CliError::Config(format!("scan.labels: expected `truth` or `kmeans`, got `{other}`"))),
        };
        Ok(ScanOptions {
            grid_steps: self.parsed("scan", "grid_steps")?,
            batch_size: self.parsed("scan", "batch_size")?,
            batches: self.parsed("scan", "batches")?,
            kmeans,
        })
    }

    pub fn metrics_k(&self) -> Result<usize, CliError> {
        self.parsed("metrics", "k")
    }

    /// The settings in file syntax, sections in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for sec in sections() {
            let _ = writeln!(out, "[{sec}]");
            for &(s, k, _) in DEFAULTS.iter().filter(|d| d.0 == sec) {
                let _ = writeln!(out, "{k} = {}", self.get(s, k));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OleBoundSettings {
    pub d: usize,
    pub r: usize,
    pub n: usize,
    pub trials: usize,
    pub cosines: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBoundSettings {
    pub d: usize,
    pub r: usize,
    pub sigmas: Vec<f64>,
    pub theta_points: usize,
    pub trials: usize,
}

impl ConfidenceBoundSettings {
    /// `theta_points` angles evenly spaced over `[0, π/2]`.
    pub fn thetas(&self) -> Vec<f64> {
        let k = self.theta_points.max(2) - 1;
        (0..=k).map(|i| std::f64::consts::FRAC_PI_2 * i as f64 / k as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub grid_steps: usize,
    pub batch_size: usize,
    pub batches: usize,
    pub kmeans: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let s = Settings::parse("").unwrap();
        let v = s.ole_bound().unwrap();
        assert_eq!((v.d, v.r, v.n, v.trials), (64, 9, 4, 2000));
        assert_eq!(s.loop_config(Strategy::AcuLsf).unwrap().probe, ProbeHyper::default());
    }

    #[test]
    fn misspelled_key_names_the_nearest() {
        let err = Settings::parse("[loop]\nstratgy = ACU\n").unwrap_err().to_string();
        assert!(err.contains("loop.stratgy") && err.contains("`strategy`"), "{err}");
    }

    #[test]
    fn all_unknown_keys_are_listed() {
        let err = Settings::parse("[loop]\nfoo = 1\nbudgte = 3\n[probe]\nepoch = 4\n").unwrap_err().to_string();
        assert!(err.contains("loop.foo") && err.contains("`budget`") && err.contains("`epochs`"), "{err}");
    }

    #[test]
    fn type_mismatch_and_structure_errors() {
        assert!(Settings::parse("[loop]\nbudget = many\n").unwrap_err().to_string().contains("loop.budget"));
        assert!(Settings::parse("budget = 3\n").is_err());
        assert!(Settings::parse("[lop]\n").unwrap_err().to_string().contains("[loop]"));
        assert!(Settings::parse("[loop]\nbudget =\n").is_err());
        assert!(Settings::parse("[loop]\nbudget = 3\nbudget = 4\n").is_err());
        assert!(Settings::parse("[loop]\nbeta_start = 0.001\n").is_err());
    }

    #[test]
    fn comments_and_whitespace() {
        let s = Settings::parse("# header\n[loop]\n  budget=300   # trailing\n\n[run]\nseed = 7\n").unwrap();
        assert_eq!(s.get("loop", "budget"), "300");
        assert_eq!(s.seed().unwrap(), 7);
    }

    #[test]
    fn text_round_trips() {
        let mut s = Settings::default();
        s.set("loop", "strategy", "SYN,ACU-LSF");
        s.set("loop", "sigma", "0.1");
        s.set("verify.ole", "cosines", "0, 0.05");
        let back = Settings::parse(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.strategies().unwrap(), vec![Strategy::Syn, Strategy::AcuLsf]);
    }

    #[test]
    fn manifest_section_is_accepted() {
        let s = Settings::parse("[manifest]\ncommand = run-loop\nversion = 1\n[run]\nseed = 3\n").unwrap();
        assert_eq!(s.seed().unwrap(), 3);
        assert!(Settings::parse("[manifest]\ncolor = red\n").is_err());
    }
}
