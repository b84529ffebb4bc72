//! Flat key = value pipeline configuration.
//!
//! One config type covers every stage; unknown keys are rejected so typos
//! fail loudly, and every run writes the fully resolved config next to its
//! outputs in a canonical key order.

use std::path::Path;

use crate::curves::IntensityConfig;
use crate::error::{Error, Result};
use crate::forest::{ClassWeight, CohortConfig, ForestHyperParams, NegativePolicy};
use crate::ica::IcaOptions;
use crate::synth::{SynthConfig, TargetSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    // Synthetic cohort.
    pub n_patients: usize,
    pub n_codes: usize,
    pub n_labs: usize,
    pub k_true: usize,
    pub span_min: f64,
    pub span_max: f64,
    pub start_year: f64,
    pub baseline_code_rate: f64,
    pub lab_noise_sd: f64,
    pub lab_rate_per_year: f64,
    pub threshold: f64,
    // Curves and cross-section sampling.
    pub points_per_year: f64,
    pub intensity_iterations: usize,
    pub intensity_max_bins: usize,
    pub sample_rate: f64,
    // Decomposition.
    pub k: usize,
    pub ica_tol: f64,
    pub ica_max_iter: usize,
    pub standardize: bool,
    // Forest.
    pub n_trees: usize,
    /// 0 selects the ⌈√k⌉ default.
    pub mtry: usize,
    /// 0 means unlimited depth.
    pub max_depth: usize,
    pub min_leaf: usize,
    pub balanced: bool,
    // Prediction task.
    pub horizon: f64,
    pub window_days: f64,
    pub min_data: usize,
    pub one_negative_per_record: bool,
    pub test_fraction: f64,
    // Reporting.
    pub report_top: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_patients: 800,
            n_codes: 25,
            n_labs: 15,
            k_true: 6,
            span_min: 8.0,
            span_max: 20.0,
            start_year: 2000.0,
            baseline_code_rate: 0.2,
            lab_noise_sd: 5.0,
            lab_rate_per_year: 6.0,
            threshold: 0.5,
            points_per_year: 52.0,
            intensity_iterations: 100,
            intensity_max_bins: 50,
            sample_rate: 1.0,
            k: 10,
            ica_tol: 1e-4,
            ica_max_iter: 500,
            standardize: false,
            n_trees: 300,
            mtry: 0,
            max_depth: 0,
            min_leaf: 1,
            balanced: false,
            horizon: 10.0,
            window_days: 30.0,
            min_data: 10,
            one_negative_per_record: false,
            test_fraction: 0.2,
            report_top: 10,
            seed: 0,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),+ $(,)?) => {
        const KEY_NAMES: &[&str] = &[$(stringify!($key)),+];

        impl PipelineConfig {
            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($key) => {
                        self.$key = parse_value!($kind, key, value)?;
                        Ok(())
                    })+
                    _ => Err(format!("unknown key {key:?}")),
                }
            }

            /// Canonical text form: every key, fixed order, shortest
            /// round-trip float formatting.
            pub fn canonical(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str(stringify!($key));
                    out.push_str(" = ");
                    out.push_str(&self.$key.to_string());
                    out.push('\n');
                )+
                out
            }
        }
    };
}

macro_rules! parse_value {
    (f64, $key:ident, $value:ident) => {
        $value
            .parse::<f64>()
            .map_err(|_| format!("key {}: expected a number, got {:?}", $key, $value))
    };
    (usize, $key:ident, $value:ident) => {
        $value
            .parse::<usize>()
            .map_err(|_| format!("key {}: expected a non-negative integer, got {:?}", $key, $value))
    };
    (u64, $key:ident, $value:ident) => {
        $value
            .parse::<u64>()
            .map_err(|_| format!("key {}: expected a non-negative integer, got {:?}", $key, $value))
    };
    (bool, $key:ident, $value:ident) => {
        match $value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("key {}: expected true or false, got {:?}", $key, $value)),
        }
    };
}

config_keys! {
    n_patients: usize,
    n_codes: usize,
    n_labs: usize,
    k_true: usize,
    span_min: f64,
    span_max: f64,
    start_year: f64,
    baseline_code_rate: f64,
    lab_noise_sd: f64,
    lab_rate_per_year: f64,
    threshold: f64,
    points_per_year: f64,
    intensity_iterations: usize,
    intensity_max_bins: usize,
    sample_rate: f64,
    k: usize,
    ica_tol: f64,
    ica_max_iter: usize,
    standardize: bool,
    n_trees: usize,
    mtry: usize,
    max_depth: usize,
    min_leaf: usize,
    balanced: bool,
    horizon: f64,
    window_days: f64,
    min_data: usize,
    one_negative_per_record: bool,
    test_fraction: f64,
    report_top: usize,
    seed: u64,
}

impl PipelineConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown and repeated keys are errors.
    pub fn parse(text: &str, origin: &Path) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::malformed(
                    origin,
                    lineno,
                    format!("expected key = value, got {raw:?}"),
                ));
            };
            let key = key.trim();
            let value = value.trim();
            let known = KEY_NAMES.iter().find(|&&k| k == key);
            match known {
                Some(&k) if seen.contains(&k) => {
                    return Err(Error::malformed(
                        origin,
                        lineno,
                        format!("key {key:?} set twice"),
                    ));
                }
                Some(&k) => seen.push(k),
                None => {}
            }
            cfg.set(key, value)
                .map_err(|msg| Error::malformed(origin, lineno, msg))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::parse(&text, path)
    }

    pub fn write_resolved(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.canonical()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.k == 0 || self.k_true == 0 {
            return bad("k and k_true must be positive".into());
        }
        if !(self.span_min > 0.0 && self.span_max >= self.span_min) {
            return bad(format!(
                "span range ({}, {}) invalid",
                self.span_min, self.span_max
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} not in (0, 1)", self.test_fraction));
        }
        if !(self.points_per_year > 0.0) || !(self.sample_rate > 0.0) {
            return bad("points_per_year and sample_rate must be positive".into());
        }
        if self.intensity_iterations == 0 || self.intensity_max_bins == 0 {
            return bad("intensity iterations and max_bins must be positive".into());
        }
        if !(self.ica_tol > 0.0) || self.ica_max_iter == 0 {
            return bad("ica_tol must be positive and ica_max_iter nonzero".into());
        }
        if self.report_top == 0 {
            return bad("report_top must be positive".into());
        }
        // Stage-specific limits (rates, trees, horizon) are validated by the
        // stages themselves; this catches cross-stage inconsistencies early.
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_patients: self.n_patients,
            n_codes: self.n_codes,
            n_labs: self.n_labs,
            span_years: (self.span_min, self.span_max),
            start_year: self.start_year,
            baseline_code_rate: self.baseline_code_rate,
            lab_noise_sd: self.lab_noise_sd,
            lab_rate_per_year: self.lab_rate_per_year,
            seed: self.seed,
            target: TargetSpec {
                phenotype_id: "pheno_00".into(),
                threshold: self.threshold,
                horizon_years: self.horizon,
            },
        }
    }

    pub fn intensity_config(&self) -> IntensityConfig {
        IntensityConfig {
            iterations: self.intensity_iterations,
            max_bins: self.intensity_max_bins,
            seed: self.seed,
        }
    }

    pub fn ica_options(&self) -> IcaOptions {
        IcaOptions {
            rank: self.k,
            seed: self.seed,
            tol: self.ica_tol,
            max_iter: self.ica_max_iter,
            standardize: self.standardize,
        }
    }

    pub fn forest_params(&self) -> ForestHyperParams {
        ForestHyperParams {
            n_trees: self.n_trees,
            mtry: (self.mtry > 0).then_some(self.mtry),
            max_depth: (self.max_depth > 0).then_some(self.max_depth),
            min_leaf: self.min_leaf,
            class_weight: if self.balanced {
                ClassWeight::Balanced
            } else {
                ClassWeight::Uniform
            },
        }
    }

    pub fn cohort_config(&self) -> CohortConfig {
        CohortConfig {
            horizon_years: self.horizon,
            window_days: self.window_days,
            min_data: self.min_data,
            negatives: if self.one_negative_per_record {
                NegativePolicy::OnePerRecord
            } else {
                NegativePolicy::AllEligible
            },
        }
    }
}
