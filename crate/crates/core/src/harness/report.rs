// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report records and their JSON / CSV / tidy plot-data rendering.
//!
//! A report is `{header, result}`; `result` is tagged by `protocol`. CSV
//! files start with one `#` line carrying the toolkit version, config hash
//! and master seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::stats::EffectSizeResult;

use super::config::{ExperimentConfig, Perturbation};

pub const SCHEMA_VERSION: u32 = 1;
/// Versioned JSON schema for reports.
pub const SCHEMA: &str = include_str!("../../schemas/report.v1.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub cohens_d: String,
    pub correlation: String,
    pub confidence_interval: String,
    pub sampling: String,
    pub v_prime: String,
    pub perp_only: String,
}

impl Conventions {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let v_prime = match cfg.perturbation {
            Perturbation::RandomOrthogonal => "(v + |v| u) / sqrt(2), u uniform unit orthogonal to v",
            Perturbation::ExactNull => "v + |v| u, u unit in the common Jacobian null space, orthogonal to v",
            Perturbation::Identity => "v",
        };
        Self {
            cohens_d: "pooled sd, n-1 variances, d = (mean v' - mean v) / s_pooled".into(),
            correlation: "pearson over per-prompt mean scores".into(),
            confidence_interval: "95% percentile cluster bootstrap over prompts, widened to contain the estimate".into(),
            sampling: format!(
                "{} tokens per generation by inverse cdf, uniforms shared across arms per (seed, prompt, sample)",
                cfg.gen_len
            ),
            v_prime: v_prime.into(),
            perp_only: "|v| u".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub rng_scheme: String,
    pub conventions: Conventions,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed_index: usize,
    pub effect: EffectSizeResult,
    pub effect_v: f64,
    pub effect_v_prime: f64,
    pub effect_perp: f64,
    /// Absent when steering with `v` has no effect.
    pub perp_only_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_seeds: usize,
    pub mean_d: f64,
    pub sd_d: f64,
    pub mean_abs_d: f64,
    pub mean_r: f64,
    pub sd_r: f64,
    pub perp_only_mean: Option<f64>,
    pub perp_only_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassFlags {
    /// `|mean d| < 0.2`.
    pub negligible_mean_d: bool,
    pub all_seeds_negligible: bool,
    /// Whether theory guarantees equivalence for this perturbation, so the
    /// flags above are claims rather than observations.
    pub asserted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    #[serde(rename = "trait")]
    pub trait_label: String,
    pub env: String,
    pub n_prompts: usize,
    pub samples_per_prompt: usize,
    pub perturbation: Perturbation,
    pub provenance: BTreeMap<String, String>,
    pub per_seed: Vec<SeedRow>,
    pub aggregate: Aggregate,
    pub pass_flags: PassFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityResult {
    pub traits: Vec<EquivalenceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub seed_index: usize,
    pub arm: String,
    pub mean_score: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean logit-mode probe score.
    pub logit_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub alpha: f64,
    pub arm: String,
    pub mean_score: f64,
    pub sd_score: f64,
    pub logit_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitSweep {
    #[serde(rename = "trait")]
    pub trait_label: String,
    pub env: String,
    pub points: Vec<SweepPoint>,
    pub curves: Vec<SweepCurve>,
    /// `max |mean_v(α) − mean_v′(α)|` over α and seeds.
    pub max_gap: f64,
    pub max_logit_gap: f64,
    pub alpha_zero_equals_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSweepResult {
    pub alpha_grid: Vec<f64>,
    pub perturbation: Perturbation,
    pub traits: Vec<TraitSweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvCell {
    #[serde(rename = "trait")]
    pub trait_label: String,
    pub env: String,
    /// Column header: `ID`, `Top`, `Gen` or `Saf`.
    pub column: String,
    pub mean_d: f64,
    pub sd_d: f64,
    pub mean_abs_d: f64,
    pub mean_r: f64,
    pub perp_only_mean: Option<f64>,
}

/// `mean_abs_d[i][j]`: vectors extracted in env `i`, tested on env `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    #[serde(rename = "trait")]
    pub trait_label: String,
    pub envs: Vec<String>,
    pub mean_abs_d: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiEnvResult {
    pub environments: Vec<String>,
    pub cells: Vec<EnvCell>,
    pub transfer: Vec<TransferMatrix>,
    pub stacked_prompts: usize,
    pub stacked_null_dim: usize,
    pub stacked_regime: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitSeedRow {
    pub seed_index: usize,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    pub token_agreement: f64,
    pub topk_overlap: f64,
    pub mean_dist_perturbed: f64,
    pub mean_dist_random: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitLogit {
    #[serde(rename = "trait")]
    pub trait_label: String,
    pub env: String,
    pub n_prompts: usize,
    pub top_k: usize,
    pub mean_ratio: f64,
    pub sd_ratio: f64,
    pub token_agreement_pct: f64,
    pub topk_overlap_pct: f64,
    pub mean_dist_perturbed: f64,
    pub mean_dist_random: f64,
    pub provenance: BTreeMap<String, String>,
    pub per_seed: Vec<LogitSeedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitResult {
    pub perturbation: Perturbation,
    pub traits: Vec<TraitLogit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpectrum {
    pub prompt: usize,
    pub rank: usize,
    pub null_dim: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub regime: String,
    pub singular_values: Vec<f64>,
    /// Max-abs gap between forward-mode and central-difference Jacobians.
    pub fd_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullspaceResult {
    pub d: usize,
    pub vocab: usize,
    pub inject_layer: usize,
    pub eps: f64,
    pub min_null_dim: usize,
    pub max_null_dim: usize,
    pub expected_null_fraction: f64,
    pub stacked_null_dim: usize,
    pub stacked_regime: String,
    /// Null-energy fraction of `v` at the first prompt.
    pub v_null_fraction: f64,
    pub v_perp_null_fraction: Vec<f64>,
    pub max_fd_deviation: f64,
    pub prompts: Vec<PromptSpectrum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherPromptRow {
    pub prompt: usize,
    pub degenerate_directions: usize,
    pub sigma_max: f64,
    pub max_null_quadratic_form: f64,
    /// `max uᵀJᵀJu / σ_max²`.
    pub normalized_max_quadratic_form: f64,
    pub crb_min: f64,
    pub crb_max: f64,
    pub min_fisher_eigenvalue: f64,
    pub fisher_asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub sigma: f64,
    pub prompts: Vec<FisherPromptRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeRow {
    pub gauge_index: usize,
    pub condition_number: f64,
    pub max_logit_deviation: f64,
    /// Mean angle between `A·v` and `v`, radians.
    pub mean_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeResult {
    pub condition_cap: f64,
    pub trials_per_gauge: usize,
    pub tolerance: f64,
    pub max_logit_deviation: f64,
    pub scalar_rejected: bool,
    pub pass: bool,
    pub gauges: Vec<GaugeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", content = "data", rename_all = "snake_case")]
pub enum ReportBody {
    Orthogonality(OrthogonalityResult),
    ScaleSweep(ScaleSweepResult),
    MultiEnv(MultiEnvResult),
    Logit(LogitResult),
    Nullspace(NullspaceResult),
    Fisher(FisherResult),
    Gauge(GaugeResult),
}

impl ReportBody {
    pub fn protocol(&self) -> &'static str {
        match self {
            ReportBody::Orthogonality(_) => "orthogonality",
            ReportBody::ScaleSweep(_) => "scale_sweep",
            ReportBody::MultiEnv(_) => "multi_env",
            ReportBody::Logit(_) => "logit",
            ReportBody::Nullspace(_) => "nullspace",
            ReportBody::Fisher(_) => "fisher",
            ReportBody::Gauge(_) => "gauge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub header: ReportHeader,
    pub result: ReportBody,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig, result: ReportBody) -> Self {
        Self {
            header: ReportHeader {
                schema_version: SCHEMA_VERSION,
                toolkit_version: crate::VERSION.to_string(),
                config_hash: cfg.hash(),
                master_seed: cfg.master_seed,
                rng_scheme: seeds::SCHEME.to_string(),
                conventions: Conventions::for_config(cfg),
                config: cfg.clone(),
            },
            result,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Report = serde_json::from_str(text)?;
        if report.header.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema version {} is not {SCHEMA_VERSION}",
                report.header.schema_version
            )));
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn csv_preamble(&self) -> String {
        format!(
            "# toolkit_version={} config_hash={} master_seed={} schema_version={}\n",
            self.header.toolkit_version, self.header.config_hash, self.header.master_seed, self.header.schema_version
        )
    }

    /// Main CSV: one row per seed (or prompt / gauge / cell) per trait.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        match &self.result {
            ReportBody::Orthogonality(r) => {
                for t in &r.traits {
                    for s in &t.per_seed {
                        w.serialize(OrthoCsv::new(t, s))?;
                    }
                }
            }
            ReportBody::ScaleSweep(r) => {
                for t in &r.traits {
                    for p in &t.points {
                        w.serialize(SweepCsv {
                            trait_label: &t.trait_label,
                            env: &t.env,
                            alpha: p.alpha,
                            seed: p.seed_index,
                            arm: &p.arm,
                            mean_score: p.mean_score,
                            ci_low: p.ci_low,
                            ci_high: p.ci_high,
                            logit_score: p.logit_score,
                        })?;
                    }
                }
            }
            ReportBody::MultiEnv(r) => {
                for c in &r.cells {
                    w.serialize(c)?;
                }
            }
            ReportBody::Logit(r) => {
                for t in &r.traits {
                    for s in &t.per_seed {
                        w.serialize(LogitCsv {
                            trait_label: &t.trait_label,
                            env: &t.env,
                            seed: s.seed_index,
                            mean_ratio: s.mean_ratio,
                            max_ratio: s.max_ratio,
                            token_agreement: s.token_agreement,
                            topk_overlap: s.topk_overlap,
                            mean_dist_perturbed: s.mean_dist_perturbed,
                            mean_dist_random: s.mean_dist_random,
                        })?;
                    }
                }
            }
            ReportBody::Nullspace(r) => {
                for p in &r.prompts {
                    w.serialize(NullCsv::from(p))?;
                }
            }
            ReportBody::Fisher(r) => {
                for p in &r.prompts {
                    w.serialize(p)?;
                }
            }
            ReportBody::Gauge(r) => {
                for g in &r.gauges {
                    w.serialize(g)?;
                }
            }
        }
        self.finish_csv(w)
    }

    /// Tidy long-format plot data: `protocol,trait,env,arm,seed,alpha,metric,value`.
    pub fn to_plot_csv(&self) -> Result<String> {
        let mut rows: Vec<PlotRow> = Vec::new();
        let protocol = self.result.protocol();
        let mut push = |trait_label: &str, env: &str, arm: &str, seed: Option<usize>, alpha: Option<f64>, metric: &str, value: f64| {
            rows.push(PlotRow {
                protocol,
                trait_label: trait_label.to_string(),
                env: env.to_string(),
                arm: arm.to_string(),
                seed,
                alpha,
                metric: metric.to_string(),
                value,
            })
        };
        match &self.result {
            ReportBody::Orthogonality(r) => {
                for t in &r.traits {
                    for s in &t.per_seed {
                        let seed = Some(s.seed_index);
                        push(&t.trait_label, &t.env, "v_prime", seed, None, "cohens_d", s.effect.cohens_d);
                        push(&t.trait_label, &t.env, "v_prime", seed, None, "pearson_r", s.effect.pearson_r);
                        push(&t.trait_label, &t.env, "v", seed, None, "effect", s.effect_v);
                        push(&t.trait_label, &t.env, "v_prime", seed, None, "effect", s.effect_v_prime);
                        push(&t.trait_label, &t.env, "v_perp", seed, None, "effect", s.effect_perp);
                    }
                }
            }
            ReportBody::ScaleSweep(r) => {
                for t in &r.traits {
                    for p in &t.points {
                        let (seed, alpha) = (Some(p.seed_index), Some(p.alpha));
                        push(&t.trait_label, &t.env, &p.arm, seed, alpha, "mean_score", p.mean_score);
                        push(&t.trait_label, &t.env, &p.arm, seed, alpha, "ci_low", p.ci_low);
                        push(&t.trait_label, &t.env, &p.arm, seed, alpha, "ci_high", p.ci_high);
                        push(&t.trait_label, &t.env, &p.arm, seed, alpha, "logit_score", p.logit_score);
                    }
                }
            }
            ReportBody::MultiEnv(r) => {
                for c in &r.cells {
                    push(&c.trait_label, &c.env, "v_prime", None, None, "mean_d", c.mean_d);
                }
                for m in &r.transfer {
                    for (i, row) in m.mean_abs_d.iter().enumerate() {
                        for (j, value) in row.iter().enumerate() {
                            let metric = format!("transfer_from_{}", m.envs[i]);
                            push(&m.trait_label, &m.envs[j], "v_prime", None, None, &metric, *value);
                        }
                    }
                }
            }
            ReportBody::Logit(r) => {
                for t in &r.traits {
                    for s in &t.per_seed {
                        let seed = Some(s.seed_index);
                        push(&t.trait_label, &t.env, "v_prime", seed, None, "ratio", s.mean_ratio);
                        push(&t.trait_label, &t.env, "v_prime", seed, None, "token_agreement", s.token_agreement);
                        push(&t.trait_label, &t.env, "v_prime", seed, None, "topk_overlap", s.topk_overlap);
                    }
                }
            }
            ReportBody::Nullspace(r) => {
                for p in &r.prompts {
                    for (i, s) in p.singular_values.iter().enumerate() {
                        push("", "", "", Some(p.prompt), None, &format!("sigma_{i}"), *s);
                    }
                }
            }
            ReportBody::Fisher(r) => {
                for p in &r.prompts {
                    push("", "", "", Some(p.prompt), None, "normalized_max_quadratic_form", p.normalized_max_quadratic_form);
                    push("", "", "", Some(p.prompt), None, "crb_max", p.crb_max);
                }
            }
            ReportBody::Gauge(r) => {
                for g in &r.gauges {
                    push("", "", "", Some(g.gauge_index), None, "max_logit_deviation", g.max_logit_deviation);
                    push("", "", "", Some(g.gauge_index), None, "condition_number", g.condition_number);
                }
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        if rows.is_empty() {
            w.write_record(["protocol", "trait", "env", "arm", "seed", "alpha", "metric", "value"])?;
        }
        for r in &rows {
            w.serialize(r)?;
        }
        self.finish_csv(w)
    }

    fn finish_csv(&self, w: csv::Writer<Vec<u8>>) -> Result<String> {
        let body = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
        let body = String::from_utf8(body).map_err(|e| Error::Config(format!("csv encoding: {e}")))?;
        Ok(self.csv_preamble() + &body)
    }
}

#[derive(Serialize)]
struct OrthoCsv<'a> {
    #[serde(rename = "trait")]
    trait_label: &'a str,
    env: &'a str,
    seed: usize,
    cohens_d: f64,
    pearson_r: f64,
    n1: usize,
    n2: usize,
    ci_low: f64,
    ci_high: f64,
    effect_v: f64,
    effect_v_prime: f64,
    effect_perp: f64,
    perp_only_ratio: Option<f64>,
}

impl<'a> OrthoCsv<'a> {
    fn new(t: &'a EquivalenceReport, s: &SeedRow) -> Self {
        Self {
            trait_label: &t.trait_label,
            env: &t.env,
            seed: s.seed_index,
            cohens_d: s.effect.cohens_d,
            pearson_r: s.effect.pearson_r,
            n1: s.effect.n1,
            n2: s.effect.n2,
            ci_low: s.effect.ci_low,
            ci_high: s.effect.ci_high,
            effect_v: s.effect_v,
            effect_v_prime: s.effect_v_prime,
            effect_perp: s.effect_perp,
            perp_only_ratio: s.perp_only_ratio,
        }
    }
}

#[derive(Serialize)]
struct SweepCsv<'a> {
    #[serde(rename = "trait")]
    trait_label: &'a str,
    env: &'a str,
    alpha: f64,
    seed: usize,
    arm: &'a str,
    mean_score: f64,
    ci_low: f64,
    ci_high: f64,
    logit_score: f64,
}

#[derive(Serialize)]
struct LogitCsv<'a> {
    #[serde(rename = "trait")]
    trait_label: &'a str,
    env: &'a str,
    seed: usize,
    mean_ratio: f64,
    max_ratio: f64,
    token_agreement: f64,
    topk_overlap: f64,
    mean_dist_perturbed: f64,
    mean_dist_random: f64,
}

#[derive(Serialize)]
struct NullCsv {
    prompt: usize,
    rank: usize,
    null_dim: usize,
    sigma_max: f64,
    sigma_min: f64,
    regime: String,
    fd_max_abs: f64,
}

impl From<&PromptSpectrum> for NullCsv {
    fn from(p: &PromptSpectrum) -> Self {
        Self {
            prompt: p.prompt,
            rank: p.rank,
            null_dim: p.null_dim,
            sigma_max: p.sigma_max,
            sigma_min: p.sigma_min,
            regime: p.regime.clone(),
            fd_max_abs: p.fd_max_abs,
        }
    }
}

#[derive(Serialize)]
struct PlotRow {
    protocol: &'static str,
    #[serde(rename = "trait")]
    trait_label: String,
    env: String,
    arm: String,
    seed: Option<usize>,
    alpha: Option<f64>,
    metric: String,
    value: f64,
}

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| Error::io(&path, e))?;
    tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
    Ok(path)
}

/// Output format for [`render_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    All,
}

/// Write `<protocol>.json`, `<protocol>.csv` and `<protocol>_plot.csv` under `dir`.
pub fn render_report(report: &Report, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = report.result.protocol();
    let mut out = Vec::new();
    if matches!(format, Format::Json | Format::All) {
        out.push(write_atomic(dir, &format!("{stem}.json"), &report.to_json()?)?);
    }
    if matches!(format, Format::Csv | Format::All) {
        out.push(write_atomic(dir, &format!("{stem}.csv"), &report.to_csv()?)?);
        out.push(write_atomic(dir, &format!("{stem}_plot.csv"), &report.to_plot_csv()?)?);
    }
    Ok(out)
}

/// Every report JSON file directly under `dir`, sorted by name.
pub fn find_reports(dir: &Path) -> Result<Vec<(PathBuf, Report)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.get("header").is_some() && value.get("result").is_some() {
            out.push((p.clone(), Report::from_json(&text)?));
        }
    }
    Ok(out)
}
