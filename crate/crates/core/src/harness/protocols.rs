// SPDX-License-Identifier: MIT OR Apache-2.0

//! The behavioural protocols and the Jacobian-level diagnostics.
//!
//! Probe scores come from toy generations: `gen_len` tokens drawn i.i.d.
//! from `softmax(logits)` by inverse CDF and scored in text mode. Every arm
//! reuses the same uniforms for a given `(trait, env, seed, prompt, sample)`,
//! so arms with identical logits produce identical scores.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::dumpio::{self, PendingEntry, Role};
use crate::error::{Error, Result};
use crate::jacobian::{self, JacobianAnalysis, NullRegime};
use crate::probes::{softmax, TraitProbe};
use crate::seeds::{self, Stream};
use crate::stats::{self, EffectSizeResult, NEGLIGIBLE_D};
use crate::steering;
use crate::toynet::{EnvKind, NetConfig, PromptInput, ToyNet};

use super::config::{ExperimentConfig, ModelSourceConfig, Perturbation};
use super::report::*;
use super::source::{build_arms, Arm, ModelSource, SeedArms, ToySource, ToyWorld};

/// Gauge equivalence tolerance on logits.
pub const GAUGE_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-6;

/// Inverse-CDF draws of `gen_len` tokens.
pub fn sample_generation(probs: &[f64], rng: &mut impl Rng, gen_len: usize) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p;
        cdf.push(acc);
    }
    let last = probs.len() - 1;
    (0..gen_len)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c <= u).min(last)
        })
        .collect()
}

/// Probe scores per prompt and sample for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmScores {
    pub per_prompt: Vec<Vec<f64>>,
}

impl ArmScores {
    pub fn flat(&self) -> Vec<f64> {
        self.per_prompt.iter().flatten().copied().collect()
    }

    pub fn prompt_means(&self) -> Vec<f64> {
        self.per_prompt.iter().map(|s| stats::mean(s)).collect()
    }

    fn flat_subset(&self, prompts: &[usize]) -> Vec<f64> {
        prompts.iter().flat_map(|&p| self.per_prompt[p].iter().copied()).collect()
    }
}

fn source_keys(src: &dyn ModelSource) -> (u64, u64) {
    (seeds::label_key(src.trait_label()), seeds::label_key(src.env_label()))
}

pub fn arm_scores(
    src: &dyn ModelSource,
    probe: &TraitProbe,
    cfg: &ExperimentConfig,
    arm: Arm,
    seed_index: usize,
) -> Result<ArmScores> {
    let (tk, ek) = source_keys(src);
    let per_prompt = (0..src.n_prompts())
        .into_par_iter()
        .map(|p| {
            let logits = src.logits(arm, p)?;
            let probs = softmax(&logits);
            Ok((0..cfg.samples_per_prompt)
                .map(|s| {
                    let mut rng =
                        seeds::rng(cfg.master_seed, Stream::Sampling, &[tk, ek, seed_index as u64, p as u64, s as u64]);
                    probe.score_tokens(&sample_generation(&probs, &mut rng, cfg.gen_len))
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(ArmScores { per_prompt })
}

fn sd_or_zero(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        stats::sample_sd(xs)
    }
}

fn check_source(src: &dyn ModelSource) -> Result<()> {
    if src.n_prompts() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: src.n_prompts(),
        });
    }
    if src.n_seeds() == 0 {
        return Err(Error::InvalidArgument("model source has no perturbation seeds".into()));
    }
    Ok(())
}

fn seed_row(
    src: &dyn ModelSource,
    probe: &TraitProbe,
    cfg: &ExperimentConfig,
    seed_index: usize,
) -> Result<SeedRow> {
    let base = arm_scores(src, probe, cfg, Arm::Baseline, seed_index)?;
    let v = arm_scores(src, probe, cfg, Arm::V, seed_index)?;
    let vp = arm_scores(src, probe, cfg, Arm::VPrime(seed_index), seed_index)?;
    let perp = arm_scores(src, probe, cfg, Arm::VPerp(seed_index), seed_index)?;

    let (flat_v, flat_vp) = (v.flat(), vp.flat());
    let d = stats::cohens_d(&flat_vp, &flat_v)?;
    let r = stats::pearson(&v.prompt_means(), &vp.prompt_means())?;

    let (tk, ek) = source_keys(src);
    let boot_seed = seeds::derive(cfg.master_seed, Stream::Bootstrap, &[tk, ek, seed_index as u64]);
    let prompts: Vec<usize> = (0..src.n_prompts()).collect();
    let (lo, hi) = stats::bootstrap_ci(
        &prompts,
        |idx| stats::cohens_d(&vp.flat_subset(idx), &v.flat_subset(idx)).unwrap_or(f64::NAN),
        cfg.n_boot,
        boot_seed,
    )?;

    let flat_base = base.flat();
    let effect_v = stats::steering_effect(&flat_v, &flat_base);
    let effect_v_prime = stats::steering_effect(&flat_vp, &flat_base);
    let effect_perp = stats::steering_effect(&perp.flat(), &flat_base);
    Ok(SeedRow {
        seed_index,
        effect: EffectSizeResult {
            cohens_d: d,
            pearson_r: r,
            n1: flat_vp.len(),
            n2: flat_v.len(),
            // the interval always brackets the point estimate
            ci_low: lo.min(d),
            ci_high: hi.max(d),
            seed: seed_index as u64,
        },
        effect_v,
        effect_v_prime,
        effect_perp,
        perp_only_ratio: stats::perp_only_ratio(effect_perp, effect_v).ok(),
    })
}

pub fn aggregate(rows: &[SeedRow]) -> Aggregate {
    let ds: Vec<f64> = rows.iter().map(|r| r.effect.cohens_d).collect();
    let abs: Vec<f64> = ds.iter().map(|d| d.abs()).collect();
    let rs: Vec<f64> = rows.iter().map(|r| r.effect.pearson_r).collect();
    let ratios: Option<Vec<f64>> = rows.iter().map(|r| r.perp_only_ratio).collect();
    Aggregate {
        n_seeds: rows.len(),
        mean_d: stats::mean(&ds),
        sd_d: sd_or_zero(&ds),
        mean_abs_d: stats::mean(&abs),
        mean_r: stats::mean(&rs),
        sd_r: sd_or_zero(&rs),
        perp_only_mean: ratios.as_ref().map(|r| stats::mean(r)),
        perp_only_sd: ratios.as_ref().map(|r| sd_or_zero(r)),
    }
}

/// Orthogonality protocol for one (trait, environment) source.
pub fn orthogonality_from_source(
    src: &dyn ModelSource,
    probe: &TraitProbe,
    cfg: &ExperimentConfig,
) -> Result<EquivalenceReport> {
    check_source(src)?;
    let per_seed = (0..src.n_seeds())
        .into_par_iter()
        .map(|s| seed_row(src, probe, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&per_seed);
    let pass_flags = PassFlags {
        negligible_mean_d: aggregate.mean_d.abs() < NEGLIGIBLE_D,
        all_seeds_negligible: per_seed.iter().all(|r| r.effect.cohens_d.abs() < NEGLIGIBLE_D),
        asserted: cfg.perturbation != Perturbation::RandomOrthogonal,
    };
    Ok(EquivalenceReport {
        trait_label: src.trait_label().to_string(),
        env: src.env_label().to_string(),
        n_prompts: src.n_prompts(),
        samples_per_prompt: cfg.samples_per_prompt,
        perturbation: cfg.perturbation,
        provenance: src.provenance(),
        per_seed,
        aggregate,
        pass_flags,
    })
}

fn toy_net(cfg: &ExperimentConfig) -> Result<&NetConfig> {
    match &cfg.model_source {
        ModelSourceConfig::Toy(net) => Ok(net),
        ModelSourceConfig::Dump(_) => Err(Error::InvalidArgument(
            "this protocol needs a toy model source".into(),
        )),
    }
}

struct DumpRun {
    dump: dumpio::DumpSource,
    probe: TraitProbe,
}

fn open_dump(cfg: &ExperimentConfig, dir: &Path) -> Result<DumpRun> {
    let dump = dumpio::DumpSource::open(dir)?;
    let probe_path = cfg.probe.clone().unwrap_or_else(|| dir.join(dumpio::PROBE_FILE));
    let probe = TraitProbe::load(&probe_path)?;
    Ok(DumpRun { dump, probe })
}

fn toy_world(cfg: &ExperimentConfig, trait_label: &str, env: EnvKind) -> Result<(ToyWorld, Vec<SeedArms>)> {
    let world = ToyWorld::build(cfg, toy_net(cfg)?, trait_label, env)?;
    let arms = build_arms(cfg, &world)?;
    Ok((world, arms))
}

pub fn run_orthogonality_test(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let traits = match &cfg.model_source {
        ModelSourceConfig::Dump(dir) => {
            let run = open_dump(cfg, dir)?;
            vec![orthogonality_from_source(&run.dump, &run.probe, cfg)?]
        }
        ModelSourceConfig::Toy(_) => cfg
            .trait_list()
            .iter()
            .map(|t| {
                let (world, arms) = toy_world(cfg, t, cfg.env)?;
                let src = ToySource {
                    world: &world,
                    arms: &arms,
                    alpha: cfg.alpha,
                };
                orthogonality_from_source(&src, &world.probe, cfg)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(Report::new(cfg, ReportBody::Orthogonality(OrthogonalityResult { traits })))
}

fn logit_score(src: &dyn ModelSource, probe: &TraitProbe, arm: Arm) -> Result<f64> {
    let scores = (0..src.n_prompts())
        .map(|p| Ok(probe.score_logits(&src.logits(arm, p)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats::mean(&scores))
}

pub fn run_scale_sweep(cfg: &ExperimentConfig, alpha_grid: &[f64]) -> Result<Report> {
    cfg.validate()?;
    if alpha_grid.is_empty() {
        return Err(Error::Config("alpha grid must be nonempty".into()));
    }
    let mut traits = Vec::new();
    for t in cfg.trait_list() {
        let (world, arms) = toy_world(cfg, &t, cfg.env)?;
        let mut points = Vec::new();
        for &alpha in alpha_grid {
            let src = ToySource {
                world: &world,
                arms: &arms,
                alpha,
            };
            let seed_points = (0..arms.len())
                .into_par_iter()
                .map(|s| {
                    let (tk, ek) = source_keys(&src);
                    let mut out = Vec::new();
                    for arm in [Arm::Baseline, Arm::V, Arm::VPrime(s)] {
                        let scores = arm_scores(&src, &world.probe, cfg, arm, s)?;
                        let means = scores.prompt_means();
                        let boot_seed = seeds::derive(
                            cfg.master_seed,
                            Stream::Bootstrap,
                            &[tk, ek, s as u64, alpha.to_bits(), seeds::label_key(arm.name())],
                        );
                        let (lo, hi) = stats::bootstrap_ci(&means, stats::mean, cfg.n_boot, boot_seed)?;
                        let m = stats::mean(&means);
                        out.push(SweepPoint {
                            alpha,
                            seed_index: s,
                            arm: arm.name().to_string(),
                            mean_score: m,
                            ci_low: lo.min(m),
                            ci_high: hi.max(m),
                            logit_score: logit_score(&src, &world.probe, arm)?,
                        });
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()?;
            points.extend(seed_points.into_iter().flatten());
        }
        traits.push(summarize_sweep(&t, cfg.env.label(), alpha_grid, points));
    }
    Ok(Report::new(
        cfg,
        ReportBody::ScaleSweep(ScaleSweepResult {
            alpha_grid: alpha_grid.to_vec(),
            perturbation: cfg.perturbation,
            traits,
        }),
    ))
}

fn summarize_sweep(trait_label: &str, env: &str, alpha_grid: &[f64], points: Vec<SweepPoint>) -> TraitSweep {
    let find = |alpha: f64, seed: usize, arm: &str| {
        points
            .iter()
            .find(|p| p.alpha == alpha && p.seed_index == seed && p.arm == arm)
            .expect("sweep point present")
    };
    let seeds: Vec<usize> = {
        let mut s: Vec<usize> = points.iter().map(|p| p.seed_index).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let (mut max_gap, mut max_logit_gap) = (0.0f64, 0.0f64);
    let mut alpha_zero_equals_baseline = true;
    let mut curves = Vec::new();
    for &alpha in alpha_grid {
        for &s in &seeds {
            let (v, vp, base) = (find(alpha, s, "v"), find(alpha, s, "v_prime"), find(alpha, s, "baseline"));
            max_gap = max_gap.max((v.mean_score - vp.mean_score).abs());
            max_logit_gap = max_logit_gap.max((v.logit_score - vp.logit_score).abs());
            if alpha == 0.0 {
                alpha_zero_equals_baseline &= v.mean_score == base.mean_score
                    && vp.mean_score == base.mean_score
                    && v.logit_score == base.logit_score
                    && vp.logit_score == base.logit_score;
            }
        }
        for arm in ["baseline", "v", "v_prime"] {
            let means: Vec<f64> = seeds.iter().map(|&s| find(alpha, s, arm).mean_score).collect();
            let logits: Vec<f64> = seeds.iter().map(|&s| find(alpha, s, arm).logit_score).collect();
            curves.push(SweepCurve {
                alpha,
                arm: arm.to_string(),
                mean_score: stats::mean(&means),
                sd_score: sd_or_zero(&means),
                logit_score: stats::mean(&logits),
            });
        }
    }
    TraitSweep {
        trait_label: trait_label.to_string(),
        env: env.to_string(),
        points,
        curves,
        max_gap,
        max_logit_gap,
        alpha_zero_equals_baseline,
    }
}

pub fn run_multi_env(cfg: &ExperimentConfig, environments: &[EnvKind]) -> Result<Report> {
    cfg.validate()?;
    if environments.len() < 2 {
        return Err(Error::Config("multi-environment protocol needs at least two environments".into()));
    }
    let mut cells = Vec::new();
    let mut transfer = Vec::new();
    let mut stacked: Vec<JacobianAnalysis<f64>> = Vec::new();
    for t in cfg.trait_list() {
        let worlds = environments
            .iter()
            .map(|&e| toy_world(cfg, &t, e))
            .collect::<Result<Vec<_>>>()?;
        for (world, arms) in &worlds {
            let src = ToySource {
                world,
                arms,
                alpha: cfg.alpha,
            };
            let rep = orthogonality_from_source(&src, &world.probe, cfg)?;
            cells.push(EnvCell {
                trait_label: t.clone(),
                env: world.env.kind.label().to_string(),
                column: world.env.kind.short().to_string(),
                mean_d: rep.aggregate.mean_d,
                sd_d: rep.aggregate.sd_d,
                mean_abs_d: rep.aggregate.mean_abs_d,
                mean_r: rep.aggregate.mean_r,
                perp_only_mean: rep.aggregate.perp_only_mean,
            });
        }
        let mut matrix = Vec::new();
        for (wi, arms_i) in &worlds {
            let mut row = Vec::new();
            for (wj, _) in &worlds {
                let cross = wi.with_eval_from(wj);
                let src = ToySource {
                    world: &cross,
                    arms: arms_i,
                    alpha: cfg.alpha,
                };
                row.push(orthogonality_from_source(&src, &cross.probe, cfg)?.aggregate.mean_abs_d);
            }
            matrix.push(row);
        }
        transfer.push(TransferMatrix {
            trait_label: t.clone(),
            envs: environments.iter().map(|e| e.short().to_string()).collect(),
            mean_abs_d: matrix,
        });
        if stacked.is_empty() {
            for (world, _) in &worlds {
                let analyses = world.eval_analyses(cfg.eps)?;
                stacked.extend(analyses.into_iter().take(cfg.nullspace_prompts));
            }
        }
    }
    let common = jacobian::stack(&stacked)?;
    Ok(Report::new(
        cfg,
        ReportBody::MultiEnv(MultiEnvResult {
            environments: environments.iter().map(|e| e.label().to_string()).collect(),
            cells,
            transfer,
            stacked_prompts: stacked.len(),
            stacked_null_dim: common.null_dim(),
            stacked_regime: regime_label(common.regime),
        }),
    ))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Logit-level equivalence for one source.
pub fn logit_from_source(src: &dyn ModelSource) -> Result<TraitLogit> {
    check_source(src)?;
    let per_seed = (0..src.n_seeds())
        .into_par_iter()
        .map(|s| {
            let mut ratios = Vec::new();
            let (mut agree, mut overlap, mut dp, mut dr) = (0usize, 0.0, 0.0, 0.0);
            for p in 0..src.n_prompts() {
                let lv = src.logits(Arm::V, p)?;
                let lp = src.logits(Arm::VPrime(s), p)?;
                let lr = src.logits(Arm::Random(s), p)?;
                let eq = stats::logit_equivalence(&lv, &lp, &lr).map_err(|e| e.at_prompt(p))?;
                ratios.push(eq.ratio);
                agree += eq.token_agree as usize;
                overlap += eq.topk_overlap;
                dp += dist(&lv, &lp);
                dr += dist(&lv, &lr);
            }
            let n = src.n_prompts() as f64;
            Ok(LogitSeedRow {
                seed_index: s,
                mean_ratio: stats::mean(&ratios),
                max_ratio: ratios.iter().copied().fold(0.0, f64::max),
                token_agreement: agree as f64 / n,
                topk_overlap: overlap / n,
                mean_dist_perturbed: dp / n,
                mean_dist_random: dr / n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&LogitSeedRow) -> f64| per_seed.iter().map(f).collect::<Vec<f64>>();
    let ratios = col(|r| r.mean_ratio);
    Ok(TraitLogit {
        trait_label: src.trait_label().to_string(),
        env: src.env_label().to_string(),
        n_prompts: src.n_prompts(),
        top_k: stats::TOP_K.min(src.vocab()),
        mean_ratio: stats::mean(&ratios),
        sd_ratio: sd_or_zero(&ratios),
        token_agreement_pct: 100.0 * stats::mean(&col(|r| r.token_agreement)),
        topk_overlap_pct: 100.0 * stats::mean(&col(|r| r.topk_overlap)),
        mean_dist_perturbed: stats::mean(&col(|r| r.mean_dist_perturbed)),
        mean_dist_random: stats::mean(&col(|r| r.mean_dist_random)),
        provenance: src.provenance(),
        per_seed,
    })
}

pub fn run_logit_test(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let traits = match &cfg.model_source {
        ModelSourceConfig::Dump(dir) => vec![logit_from_source(&dumpio::DumpSource::open(dir)?)?],
        ModelSourceConfig::Toy(_) => cfg
            .trait_list()
            .iter()
            .map(|t| {
                let (world, arms) = toy_world(cfg, t, cfg.env)?;
                logit_from_source(&ToySource {
                    world: &world,
                    arms: &arms,
                    alpha: cfg.alpha,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(Report::new(
        cfg,
        ReportBody::Logit(LogitResult {
            perturbation: cfg.perturbation,
            traits,
        }),
    ))
}

fn analysis_prompts(cfg: &ExperimentConfig) -> Result<(ToyWorld, Vec<SeedArms>, Vec<PromptInput<f64>>)> {
    let (world, arms) = toy_world(cfg, &cfg.trait_label, cfg.env)?;
    let prompts = world.eval().iter().take(cfg.nullspace_prompts).cloned().collect();
    Ok((world, arms, prompts))
}

fn regime_label(r: NullRegime) -> String {
    format!("{r:?}").to_lowercase()
}

pub fn run_nullspace(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let (world, arms, prompts) = analysis_prompts(cfg)?;
    let net = &world.net;
    let rows = prompts
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let j = jacobian::jacobian_at(net, x).map_err(|e| e.at_prompt(i))?;
            let fd = jacobian::finite_diff_jacobian(net, x, FD_STEP).map_err(|e| e.at_prompt(i))?;
            let a = jacobian::analyze(&j, cfg.eps)?;
            Ok((
                PromptSpectrum {
                    prompt: i,
                    rank: a.rank,
                    null_dim: a.null_dim(),
                    sigma_max: a.sigma_max(),
                    sigma_min: a.singular_values.last().copied().unwrap_or(0.0),
                    regime: regime_label(a.regime),
                    singular_values: a.singular_values.clone(),
                    fd_max_abs: (&j - &fd).amax(),
                },
                a,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (spectra, analyses): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let common = jacobian::stack(&analyses)?;
    let first = &analyses[0];
    let v_null_fraction = jacobian::decompose(&world.v.v, first)?.null_energy_fraction;
    let v_perp_null_fraction = arms
        .iter()
        .map(|a| Ok(jacobian::decompose(&a.v_perp_unit, first)?.null_energy_fraction))
        .collect::<Result<Vec<f64>>>()?;
    let d = net.d() as f64;
    Ok(Report::new(
        cfg,
        ReportBody::Nullspace(NullspaceResult {
            d: net.d(),
            vocab: net.vocab(),
            inject_layer: net.inject_layer(),
            eps: cfg.eps,
            min_null_dim: spectra.iter().map(|s| s.null_dim).min().unwrap_or(0),
            max_null_dim: spectra.iter().map(|s| s.null_dim).max().unwrap_or(0),
            expected_null_fraction: spectra.iter().map(|s| s.null_dim as f64 / d).sum::<f64>() / spectra.len() as f64,
            stacked_null_dim: common.null_dim(),
            stacked_regime: regime_label(common.regime),
            v_null_fraction,
            v_perp_null_fraction,
            max_fd_deviation: spectra.iter().map(|s| s.fd_max_abs).fold(0.0, f64::max),
            prompts: spectra,
        }),
    ))
}

pub fn run_fisher(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let (world, _, prompts) = analysis_prompts(cfg)?;
    let rows = prompts
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let j = jacobian::jacobian_at(&world.net, x).map_err(|e| e.at_prompt(i))?;
            let a = jacobian::analyze(&j, cfg.eps)?;
            let f = stats::fisher_diagnostics(&a, cfg.sigma_probe)?;
            let smax2 = a.sigma_max() * a.sigma_max();
            let max_qf = f.null_quadratic_forms.iter().copied().fold(0.0, f64::max);
            let eig = f.fisher.clone().symmetric_eigenvalues();
            Ok(FisherPromptRow {
                prompt: i,
                degenerate_directions: f.degenerate_directions,
                sigma_max: a.sigma_max(),
                max_null_quadratic_form: max_qf,
                normalized_max_quadratic_form: if smax2 > 0.0 { max_qf / smax2 } else { 0.0 },
                crb_min: f.crb_pseudoinverse_spectrum.iter().copied().fold(f64::INFINITY, f64::min),
                crb_max: f.crb_pseudoinverse_spectrum.iter().copied().fold(0.0, f64::max),
                min_fisher_eigenvalue: eig.min(),
                fisher_asymmetry: (&f.fisher - f.fisher.transpose()).amax(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report::new(
        cfg,
        ReportBody::Fisher(FisherResult {
            sigma: cfg.sigma_probe,
            prompts: rows,
        }),
    ))
}

/// Max logit deviation between `net` steered by `v` and `net′` steered by `A·v`.
pub fn gauge_deviation(
    net: &ToyNet<f64>,
    gauge: &steering::GaugeMap<f64>,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let net2 = steering::reparameterize(net, gauge)?;
    let d = net.d();
    let mut rng = seeds::rng(seed, Stream::Gauge, &[u64::MAX]);
    let alpha_dist = Uniform::new(-2.0, 2.0).expect("valid range");
    let (mut max_dev, mut angle_sum) = (0.0f64, 0.0);
    for _ in 0..trials {
        let x = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let alpha = alpha_dist.sample(&mut rng);
        let input = PromptInput::new(x, EnvKind::Id);
        let av = &gauge.a * &v;
        let l1 = net.forward(&input, Some(&v), alpha)?.logits;
        let l2 = net2.forward(&input, Some(&av), alpha)?.logits;
        max_dev = max_dev.max((l1 - l2).amax());
        angle_sum += steering::angle(&av, &v);
    }
    Ok((max_dev, angle_sum / trials as f64))
}

pub fn run_gauge_check(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let net = ToyNet::<f64>::from_config(toy_net(cfg)?)?;
    let gauges = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|g| {
            let seed = seeds::derive(cfg.master_seed, Stream::Gauge, &[g as u64]);
            let gauge = steering::make_gauge::<f64>(seed, net.d(), cfg.condition_cap)?;
            let (max_logit_deviation, mean_angle) = gauge_deviation(&net, &gauge, cfg.gauge_trials, seed)?;
            Ok(GaugeRow {
                gauge_index: g,
                condition_number: gauge.condition_number,
                max_logit_deviation,
                mean_angle,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scalar = nalgebra::DMatrix::<f64>::identity(net.d(), net.d()) * 3.0;
    let scalar_rejected = steering::GaugeMap::new(scalar, cfg.condition_cap).is_err();
    let max_logit_deviation = gauges.iter().map(|g| g.max_logit_deviation).fold(0.0, f64::max);
    Ok(Report::new(
        cfg,
        ReportBody::Gauge(GaugeResult {
            condition_cap: cfg.condition_cap,
            trials_per_gauge: cfg.gauge_trials,
            tolerance: GAUGE_TOL,
            max_logit_deviation,
            scalar_rejected,
            pass: max_logit_deviation <= GAUGE_TOL && scalar_rejected,
            gauges,
        }),
    ))
}

/// Write per-arm logits, vectors, hidden states and the probe for a toy run.
pub fn export_toy_dump(cfg: &ExperimentConfig, trait_label: &str, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let (world, arms) = toy_world(cfg, trait_label, cfg.env)?;
    let src = ToySource {
        world: &world,
        arms: &arms,
        alpha: cfg.alpha,
    };
    let env = world.env.kind.label().to_string();
    let tagged = |mut e: PendingEntry, arm: Arm, prompt: Option<usize>| {
        e.meta.arm = Some(arm.name().to_string());
        e.meta.seed = arm.seed();
        e.meta.prompt_id = prompt;
        e.meta.env = Some(env.clone());
        e.meta.trait_label = Some(trait_label.to_string());
        e
    };
    let mut entries = Vec::new();
    entries.push(tagged(dumpio::steering_vector_entry("vec.v", &world.v, "v"), Arm::V, None));
    for (s, a) in arms.iter().enumerate() {
        for (arm, vec) in [
            (Arm::VPrime(s), &a.v_prime),
            (Arm::VPerp(s), &a.perp_only),
            (Arm::Random(s), &a.random),
        ] {
            entries.push(tagged(
                dumpio::steering_vector_entry(&format!("vec.{}.{s}", arm.name()), vec, arm.name()),
                arm,
                None,
            ));
        }
    }
    let mut arm_list = vec![Arm::Baseline, Arm::V];
    for s in 0..arms.len() {
        arm_list.extend([Arm::VPrime(s), Arm::VPerp(s), Arm::Random(s)]);
    }
    for p in 0..src.n_prompts() {
        let h = world.net.hidden_at_injection(&world.eval()[p])?;
        entries.push(tagged(
            PendingEntry::vector(format!("hidden.{p}"), Role::Hidden, h.iter().copied().collect()),
            Arm::Baseline,
            Some(p),
        ));
        for &arm in &arm_list {
            let name = match arm.seed() {
                Some(s) => format!("logits.{}.{s}.{p}", arm.name()),
                None => format!("logits.{}.{p}", arm.name()),
            };
            let mut e = tagged(PendingEntry::vector(name, Role::Logits, src.logits(arm, p)?), arm, Some(p));
            e.meta.meta.insert("alpha".into(), cfg.alpha.to_string());
            entries.push(e);
        }
    }
    let probe = serde_json::to_string_pretty(&world.probe.to_file())? + "\n";
    let mut extra = BTreeMap::new();
    extra.insert(dumpio::PROBE_FILE.to_string(), probe.into_bytes());
    dumpio::write_dump_with_files(
        dir,
        "toynet",
        world.net.inject_layer(),
        world.net.d(),
        world.net.vocab(),
        &entries,
        &extra,
    )
}

/// Extract `v` for `trait_label` and write it as a one-vector dump.
pub fn extract_to_dump(cfg: &ExperimentConfig, trait_label: &str, dir: &Path) -> Result<(PathBuf, f64)> {
    cfg.validate()?;
    let world = ToyWorld::build(cfg, toy_net(cfg)?, trait_label, cfg.env)?;
    let mut e = dumpio::steering_vector_entry("vec.v", &world.v, "v");
    e.meta.env = Some(world.env.kind.label().to_string());
    e.meta.meta.insert("n_pairs".into(), cfg.n_pairs.to_string());
    let path = dumpio::write_dump(
        dir,
        "toynet",
        world.net.inject_layer(),
        world.net.d(),
        world.net.vocab(),
        &[e],
    )?;
    Ok((path, world.v.norm))
}
