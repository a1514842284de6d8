//! Resolved run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use matseg::estimation::EigTransform;
use matseg::forecasting::{Baseline, Scheme};
use matseg::segmentation::{PrewhitenKind, SegmentConfig, Selector};
use matseg::simgen::{BenchConfig, Design};
use matseg::transform::PipelineConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Every tunable of the command line. Serialised into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub tau0: usize,
    pub tau1: usize,
    pub c_r: f64,
    pub rho_floor: f64,
    /// `ratio` or `threshold:<rho0>`.
    pub selector: String,
    pub prewhiten: bool,
    /// `vector` or `scalar`.
    pub prewhiten_kind: String,
    pub max_ar_order: usize,
    /// `identity`, `log1p` or `power:<alpha>`.
    pub eig_transform: String,
    /// `refit` or `fixed`.
    pub scheme: String,
    pub horizon: usize,
    pub holdout: usize,
    pub seed: u64,
    pub reps: usize,
    pub p: usize,
    pub q: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub design: String,
    pub baselines: Vec<String>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub transform: Option<PathBuf>,
    pub inverse: bool,
    pub with_truth: bool,
    pub week: usize,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            tau0: 5,
            tau1: 15,
            c_r: 0.75,
            rho_floor: 0.05,
            selector: "ratio".into(),
            prewhiten: true,
            prewhiten_kind: "vector".into(),
            max_ar_order: 5,
            eig_transform: "identity".into(),
            scheme: String::new(),
            horizon: 1,
            holdout: 10,
            seed: 1,
            reps: 1,
            p: 6,
            q: 6,
            t: 500,
            design: "example3".into(),
            baselines: Vec::new(),
            input: None,
            output: None,
            truth: None,
            transform: None,
            inverse: false,
            with_truth: false,
            week: 7,
            threads: None,
        }
    }
}

/// Replaces fields of `base` by the entries of a JSON object read from `path`.
pub fn apply_file(base: &RunConfig, path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
    let overrides: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    let Value::Object(map) = overrides else {
        return Err(CliError::Validation(format!("config {} must hold a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(base).expect("config serialises");
    let obj = merged.as_object_mut().expect("config is an object");
    for (k, v) in map {
        if k == "command" {
            continue;
        }
        obj.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
}

fn parse_prefixed(s: &str, prefix: &str) -> Option<Result<f64, CliError>> {
    s.strip_prefix(prefix).map(|v| {
        v.parse::<f64>().map_err(|_| CliError::Validation(format!("cannot parse number in '{s}'")))
    })
}

impl RunConfig {
    pub fn selector(&self) -> Result<Selector, CliError> {
        if self.selector == "ratio" {
            return Ok(Selector::Ratio);
        }
        match parse_prefixed(&self.selector, "threshold:") {
            Some(r) => Ok(Selector::Threshold(r?)),
            None => Err(CliError::Validation(format!("unknown selector '{}'", self.selector))),
        }
    }

    pub fn eig_transform(&self) -> Result<EigTransform, CliError> {
        match self.eig_transform.as_str() {
            "identity" => Ok(EigTransform::Identity),
            "log1p" => Ok(EigTransform::Log1p),
            s => match parse_prefixed(s, "power:") {
                Some(a) => Ok(EigTransform::Power(a?)),
                None => Err(CliError::Validation(format!("unknown eigenvalue transform '{s}'"))),
            },
        }
    }

    pub fn prewhiten_kind(&self) -> Result<PrewhitenKind, CliError> {
        match self.prewhiten_kind.as_str() {
            "vector" => Ok(PrewhitenKind::Vector),
            "scalar" => Ok(PrewhitenKind::Scalar),
            s => Err(CliError::Validation(format!("unknown prewhitening kind '{s}'"))),
        }
    }

    /// The scheme, defaulting to `fixed` for data files and `refit` for simulations.
    pub fn scheme(&self, simulated: bool) -> Result<Scheme, CliError> {
        match self.scheme.as_str() {
            "" if simulated => Ok(Scheme::Refit),
            "" => Ok(Scheme::Fixed),
            "refit" => Ok(Scheme::Refit),
            "fixed" => Ok(Scheme::Fixed),
            s => Err(CliError::Validation(format!("unknown scheme '{s}'"))),
        }
    }

    pub fn design(&self) -> Result<Design, CliError> {
        self.design.parse().map_err(|e: matseg::Error| CliError::Validation(e.to_string()))
    }

    pub fn baselines(&self) -> Result<Vec<Baseline>, CliError> {
        self.baselines
            .iter()
            .map(|b| match b.as_str() {
                "mar1_direct" => Ok(Baseline::Mar1Direct),
                "var1_stacked" => Ok(Baseline::Var1Stacked),
                "ar1_per_cell" => Ok(Baseline::Ar1PerCell),
                s => Err(CliError::Validation(format!("unknown baseline '{s}'"))),
            })
            .collect()
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let cfg = PipelineConfig {
            tau0: self.tau0,
            eig_transform: self.eig_transform()?,
            segment: SegmentConfig {
                tau1: self.tau1,
                c_r: self.c_r,
                rho_floor: self.rho_floor,
                prewhiten: self.prewhiten,
                prewhiten_kind: self.prewhiten_kind()?,
                max_ar_order: self.max_ar_order,
                selector: self.selector()?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bench(&self) -> Result<BenchConfig, CliError> {
        let cfg = BenchConfig {
            design: self.design()?,
            p: self.p,
            q: self.q,
            t: self.t,
            pipeline: self.pipeline()?,
            holdout: self.holdout,
            horizon: self.horizon,
            scheme: self.scheme(true)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field that does not depend on the subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline()?;
        self.design()?;
        self.baselines()?;
        self.scheme(true)?;
        if self.horizon == 0 || self.holdout == 0 || self.week == 0 {
            return Err(CliError::Validation("horizon, holdout and week must be at least 1".into()));
        }
        if self.reps == 0 {
            return Err(CliError::Validation("reps must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Validation("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn output(&self) -> Result<&Path, CliError> {
        self.output.as_deref().ok_or_else(|| CliError::Validation("--out is required".into()))
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.input.as_deref().ok_or_else(|| CliError::Validation("--input is required".into()))
    }
}

/// Parses a bench cell such as `q4p4,T1000` into `(p, q, T)`; missing parts keep `defaults`.
pub fn parse_cell(cell: &str, defaults: (usize, usize, usize)) -> Result<(usize, usize, usize), CliError> {
    let (mut p, mut q, mut t) = defaults;
    let bad = || CliError::Validation(format!("cannot parse cell '{cell}'"));
    for part in cell.split(',') {
        let part = part.trim();
        let mut rest = part;
        while !rest.is_empty() {
            let key = rest.chars().next().ok_or_else(bad)?;
            let digits: String = rest[1..].chars().take_while(|c| c.is_ascii_digit()).collect();
            if digits.is_empty() {
                return Err(bad());
            }
            let v: usize = digits.parse().map_err(|_| bad())?;
            match key {
                'p' => p = v,
                'q' => q = v,
                'T' | 't' => t = v,
                _ => return Err(bad()),
            }
            rest = &rest[1 + digits.len()..];
        }
    }
    Ok((p, q, t))
}
