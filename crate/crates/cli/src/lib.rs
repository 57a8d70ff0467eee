//! Experiment runner: executes seeded Monte-Carlo batches of the tracking
//! filters over the simulated scenarios and writes per-scan CSV reports plus
//! a summary file with the aggregates.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use pmbm_core::eval::{estimate, gospa, GospaResult};
use pmbm_core::filter::{step, FilterMode};
use pmbm_core::rfs::ClusteredPmbm;
use pmbm_core::scenario::{
    filter_birth_model, gen_measurements, gen_scenario1, gen_scenario2, GroundTruth, RunConfig,
};
use pmbm_core::PmbmError;

pub const GOSPA_C: f64 = 10.0;
pub const GOSPA_P: f64 = 2.0;

/// Stable CSV column schema of the per-scan reports.
pub const CSV_HEADER: &str = "step,gospa,gospa_loc,gospa_missed,gospa_false,n_clusters,mean_tracks_per_cluster,n_gh_before,n_gh_after,wall_ms";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("filter error: {0}")]
    Filter(#[from] PmbmError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("report schema mismatch in {path}: {message}")]
    Schema { path: String, message: String },
}

// ============================================================================
// Filter variants
// ============================================================================

/// The benchmarked filter configurations, as overrides on a base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    StandardPmbm,
    ClusteredPmbm,
    ClusteredPmbmMerging,
    ClusteredPmbmMergingSwapping,
    StandardPmb,
    ClusteredPmb,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::StandardPmbm,
        Variant::ClusteredPmbm,
        Variant::ClusteredPmbmMerging,
        Variant::ClusteredPmbmMergingSwapping,
        Variant::StandardPmb,
        Variant::ClusteredPmb,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::StandardPmbm => "standard-pmbm",
            Variant::ClusteredPmbm => "clustered-pmbm",
            Variant::ClusteredPmbmMerging => "clustered-pmbm-merging",
            Variant::ClusteredPmbmMergingSwapping => "clustered-pmbm-merging-swapping",
            Variant::StandardPmb => "standard-pmb",
            Variant::ClusteredPmb => "clustered-pmb",
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.name() == name)
    }

    /// Applies the variant to a base configuration.
    pub fn configure(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let (clustered, mode, merge, swap) = match self {
            Variant::StandardPmbm => (false, FilterMode::Pmbm, false, false),
            Variant::ClusteredPmbm => (true, FilterMode::Pmbm, false, false),
            Variant::ClusteredPmbmMerging => (true, FilterMode::Pmbm, true, false),
            Variant::ClusteredPmbmMergingSwapping => (true, FilterMode::Pmbm, true, true),
            Variant::StandardPmb => (false, FilterMode::Pmb, false, false),
            Variant::ClusteredPmb => (true, FilterMode::Pmb, false, false),
        };
        cfg.filter.clustered = clustered;
        cfg.filter.mode = mode;
        cfg.reduction.merge = merge;
        cfg.reduction.swap = swap;
        cfg
    }
}

// ============================================================================
// Single runs
// ============================================================================

/// Per-scan record of one run.
#[derive(Debug, Clone)]
pub struct ScanStats {
    pub step: usize,
    pub gospa: GospaResult,
    pub wall_s: f64,
    pub n_clusters: usize,
    pub mean_tracks_per_cluster: f64,
    pub n_gh_before: usize,
    pub n_gh_after: usize,
}

/// One seeded run of one filter variant.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_idx: usize,
    pub scans: Vec<ScanStats>,
    pub rms_gospa: f64,
    pub rms_loc: f64,
    pub rms_missed: f64,
    pub rms_false: f64,
    /// Summed per-scan step() wall time; excludes generation and I/O.
    pub total_time_s: f64,
}

/// Splittable counter scheme: every random stream is derived from the config
/// seed, the run index and a purpose tag.
pub fn derive_seed(base: u64, run_idx: u64, purpose: u64) -> u64 {
    fn splitmix64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e3779b97f4a7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }
    splitmix64(base ^ splitmix64(run_idx.wrapping_mul(2).wrapping_add(purpose + 1)))
}

/// Generates the ground truth of a run (deterministic for scenario 1).
pub fn generate_truth(cfg: &RunConfig, run_idx: usize) -> Result<GroundTruth, CliError> {
    let sc = cfg.scenario_config();
    Ok(match sc.scenario {
        1 => gen_scenario1(&sc)?,
        _ => gen_scenario2(&sc, derive_seed(cfg.seed, run_idx as u64, 0)),
    })
}

/// Executes one seeded run and collects the per-scan statistics.
pub fn run_single(cfg: &RunConfig, run_idx: usize) -> Result<RunReport, CliError> {
    let sc = cfg.scenario_config();
    let params = cfg.filter_params();
    let truth = generate_truth(cfg, run_idx)?;
    let scans_z = gen_measurements(&truth, &sc, derive_seed(cfg.seed, run_idx as u64, 1));
    let motion = sc.motion_model();
    let model = sc.measurement_model();

    let mut pmbm = ClusteredPmbm::empty();
    let mut scans = Vec::with_capacity(sc.steps);
    let mut sq_sum = 0.0;
    let mut loc_sum = 0.0;
    let mut missed_sum = 0.0;
    let mut false_sum = 0.0;
    let mut total_time = 0.0;

    for (k, z) in scans_z.iter().enumerate() {
        let step_idx = k + 1;
        let birth = filter_birth_model(&sc, step_idx);
        let t0 = Instant::now();
        let (next, stats) = step(&pmbm, z, &motion, &model, &birth, &params, step_idx)?;
        let wall_s = t0.elapsed().as_secs_f64();
        pmbm = next;

        let est = estimate(&pmbm, params.estimator_threshold);
        let g = gospa(&truth.alive_at(step_idx), &est, GOSPA_C, GOSPA_P);
        sq_sum += g.total * g.total;
        loc_sum += g.localization;
        missed_sum += g.missed;
        false_sum += g.false_;
        total_time += wall_s;
        scans.push(ScanStats {
            step: step_idx,
            gospa: g,
            wall_s,
            n_clusters: stats.n_clusters,
            mean_tracks_per_cluster: stats.mean_tracks_per_cluster,
            n_gh_before: stats.n_gh_before,
            n_gh_after: stats.n_gh_after,
        });
    }

    let n = scans.len().max(1) as f64;
    Ok(RunReport {
        run_idx,
        scans,
        rms_gospa: (sq_sum / n).sqrt(),
        rms_loc: (loc_sum / n).sqrt(),
        rms_missed: (missed_sum / n).sqrt(),
        rms_false: (false_sum / n).sqrt(),
        total_time_s: total_time,
    })
}

// ============================================================================
// Batches and reports
// ============================================================================

/// Aggregates of one variant over its Monte-Carlo batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub mc_runs: usize,
    pub failed_runs: usize,
    pub rms_gospa: f64,
    pub rms_gospa_loc: f64,
    pub rms_gospa_missed: f64,
    pub rms_gospa_false: f64,
    /// Mean per-run wall time of the filtering steps, seconds.
    pub mean_time_per_run_s: f64,
    pub total_time_s: f64,
    pub mean_clusters: f64,
    pub mean_tracks_per_cluster: f64,
    pub mean_gh_before: f64,
    pub mean_gh_after: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: u8,
    pub n_sim: usize,
    pub seed: u64,
    pub mc_runs: usize,
    pub variants: Vec<VariantSummary>,
}

/// Runs the Monte-Carlo batch of one variant; runs execute in parallel over
/// the configured worker pool. Failed runs are recorded and skipped in the
/// aggregates.
pub fn run_batch(cfg: &RunConfig, mc: usize) -> (Vec<RunReport>, usize) {
    let results: Vec<Result<RunReport, CliError>> =
        (0..mc).into_par_iter().map(|i| run_single(cfg, i)).collect();
    let mut reports = Vec::with_capacity(mc);
    let mut failed = 0;
    for r in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(err) => {
                eprintln!("run failed: {err}");
                failed += 1;
            }
        }
    }
    (reports, failed)
}

pub fn summarize_variant(name: &str, reports: &[RunReport], failed: usize) -> VariantSummary {
    let n_scans: usize = reports.iter().map(|r| r.scans.len()).sum();
    let n = n_scans.max(1) as f64;
    let sum_of = |f: &dyn Fn(&ScanStats) -> f64| -> f64 {
        reports.iter().flat_map(|r| r.scans.iter()).map(f).sum::<f64>()
    };
    let total_time: f64 = reports.iter().map(|r| r.total_time_s).sum();
    VariantSummary {
        name: name.to_string(),
        mc_runs: reports.len(),
        failed_runs: failed,
        rms_gospa: (sum_of(&|s| s.gospa.total * s.gospa.total) / n).sqrt(),
        rms_gospa_loc: (sum_of(&|s| s.gospa.localization) / n).sqrt(),
        rms_gospa_missed: (sum_of(&|s| s.gospa.missed) / n).sqrt(),
        rms_gospa_false: (sum_of(&|s| s.gospa.false_) / n).sqrt(),
        mean_time_per_run_s: total_time / reports.len().max(1) as f64,
        total_time_s: total_time,
        mean_clusters: sum_of(&|s| s.n_clusters as f64) / n,
        mean_tracks_per_cluster: sum_of(&|s| s.mean_tracks_per_cluster) / n,
        mean_gh_before: sum_of(&|s| s.n_gh_before as f64) / n,
        mean_gh_after: sum_of(&|s| s.n_gh_after as f64) / n,
    }
}

/// Per-scan CSV rows averaged across the runs of a batch: the GOSPA column
/// is the RMS across runs at that scan, the decomposition columns are mean
/// contributions, the rest are plain means.
pub fn write_scan_csv(path: &Path, reports: &[RunReport]) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    let Some(n_steps) = reports.iter().map(|r| r.scans.len()).max() else {
        return Ok(());
    };
    for k in 0..n_steps {
        let rows: Vec<&ScanStats> = reports.iter().filter_map(|r| r.scans.get(k)).collect();
        let n = rows.len() as f64;
        let rms_gospa =
            (rows.iter().map(|s| s.gospa.total * s.gospa.total).sum::<f64>() / n).sqrt();
        let mean = |f: &dyn Fn(&ScanStats) -> f64| rows.iter().map(|s| f(s)).sum::<f64>() / n;
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9},{:.9},{:.4},{:.4},{:.2},{:.2},{:.4}",
            k + 1,
            rms_gospa,
            mean(&|s| s.gospa.localization),
            mean(&|s| s.gospa.missed),
            mean(&|s| s.gospa.false_),
            mean(&|s| s.n_clusters as f64),
            mean(&|s| s.mean_tracks_per_cluster),
            mean(&|s| s.n_gh_before as f64),
            mean(&|s| s.n_gh_after as f64),
            mean(&|s| s.wall_s * 1000.0),
        )?;
    }
    Ok(())
}

/// Executes every requested variant and writes one CSV per variant plus the
/// summary file. Returns the summary.
pub fn run_command(
    base: &RunConfig,
    variants: &[Variant],
    mc: usize,
    out_dir: &Path,
) -> Result<Summary, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let mut summaries = Vec::new();
    for variant in variants {
        let cfg = variant.configure(base);
        let (reports, failed) = run_batch(&cfg, mc);
        write_scan_csv(&out_dir.join(format!("{}.csv", variant.name())), &reports)?;
        let summary = summarize_variant(variant.name(), &reports, failed);
        println!(
            "{:32} rms_gospa {:8.4} (loc {:6.3} missed {:6.3} false {:6.3})  time/run {:8.3}s",
            summary.name,
            summary.rms_gospa,
            summary.rms_gospa_loc,
            summary.rms_gospa_missed,
            summary.rms_gospa_false,
            summary.mean_time_per_run_s
        );
        summaries.push(summary);
    }
    let summary = Summary {
        scenario: base.scenario,
        n_sim: base.n_sim,
        seed: base.seed,
        mc_runs: mc,
        variants: summaries,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Config(format!("summary serialisation: {e}")))?;
    std::fs::write(out_dir.join("summary.json"), json)?;
    Ok(summary)
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let text =
        toml::to_string_pretty(cfg).map_err(|e| CliError::Config(format!("serialise: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

// ============================================================================
// Comparison
// ============================================================================

pub fn load_summary(path: &Path) -> Result<Summary, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Side-by-side comparison of summary reports. Returns the rendered table
/// (or CSV when `csv` is set).
pub fn compare_reports(paths: &[PathBuf], csv: bool) -> Result<String, CliError> {
    let mut rows: Vec<(String, VariantSummary)> = Vec::new();
    for path in paths {
        let summary = load_summary(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        // Generic file names are disambiguated by their directory.
        let label = if stem == "summary" {
            path.parent()
                .and_then(|p| p.file_name())
                .map(|d| d.to_string_lossy().into_owned())
                .unwrap_or(stem)
        } else {
            stem
        };
        for v in summary.variants {
            rows.push((label.clone(), v));
        }
    }
    let mut out = String::new();
    if csv {
        out.push_str("report,variant,rms_gospa,rms_gospa_loc,rms_gospa_missed,rms_gospa_false,mean_time_per_run_s,mean_clusters,mean_tracks_per_cluster,mean_gh_before,mean_gh_after\n");
        for (label, v) in &rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.2},{:.2}\n",
                label,
                v.name,
                v.rms_gospa,
                v.rms_gospa_loc,
                v.rms_gospa_missed,
                v.rms_gospa_false,
                v.mean_time_per_run_s,
                v.mean_clusters,
                v.mean_tracks_per_cluster,
                v.mean_gh_before,
                v.mean_gh_after
            ));
        }
    } else {
        out.push_str(&format!(
            "{:<20} {:<32} {:>9} {:>8} {:>8} {:>8} {:>10} {:>9} {:>8}\n",
            "report",
            "variant",
            "gospa",
            "loc",
            "missed",
            "false",
            "time/run",
            "clusters",
            "trk/cl"
        ));
        for (label, v) in &rows {
            out.push_str(&format!(
                "{:<20} {:<32} {:>9.4} {:>8.3} {:>8.3} {:>8.3} {:>9.3}s {:>9.3} {:>8.3}\n",
                label,
                v.name,
                v.rms_gospa,
                v.rms_gospa_loc,
                v.rms_gospa_missed,
                v.rms_gospa_false,
                v.mean_time_per_run_s,
                v.mean_clusters,
                v.mean_tracks_per_cluster
            ));
        }
    }
    Ok(out)
}

/// Builds the worker pool honouring the `PMBM_WORKERS` override.
pub fn configure_workers() {
    if let Ok(value) = std::env::var("PMBM_WORKERS") {
        if let Ok(n) = value.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

/// Parses `--filters` values into variants.
pub fn parse_variants(list: &[String]) -> Result<Vec<Variant>, CliError> {
    let mut out = Vec::new();
    for name in list {
        for part in name.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            match Variant::parse(part) {
                Some(v) => out.push(v),
                None => {
                    return Err(CliError::Config(format!(
                        "unknown filter variant '{part}' (known: {})",
                        Variant::ALL
                            .iter()
                            .map(|v| v.name())
                            .collect::<Vec<_>>()
                            .join(", ")
                    )))
                }
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no filter variants selected".into()));
    }
    Ok(out)
}

/// Mean number of alive targets across seeds, used by the scenario checks.
pub fn mean_alive_over_seeds(cfg: &RunConfig, seeds: usize) -> Result<f64, CliError> {
    let sc = cfg.scenario_config();
    let mut total = 0.0;
    for s in 0..seeds {
        let truth = match sc.scenario {
            1 => gen_scenario1(&sc)?,
            _ => gen_scenario2(&sc, derive_seed(cfg.seed, s as u64, 0)),
        };
        total += truth.mean_alive(sc.steps);
    }
    Ok(total / seeds as f64)
}

/// Clutter-count statistics over generated scans with no targets:
/// (per-scan mean, number of scans).
pub fn clutter_stats(cfg: &RunConfig, seeds: usize) -> (f64, usize) {
    let sc = cfg.scenario_config();
    let empty_truth = GroundTruth::default();
    let mut counts: Vec<f64> = Vec::new();
    for s in 0..seeds {
        let scans = gen_measurements(&empty_truth, &sc, derive_seed(cfg.seed, s as u64, 1));
        for scan in scans {
            counts.push(scan.len() as f64);
        }
    }
    let mean = counts.iter().sum::<f64>() / counts.len().max(1) as f64;
    (mean, counts.len())
}

/// Per-scan means over all runs: (mean clusters, mean tracks per cluster).
pub fn cluster_trend(reports: &[RunReport]) -> (f64, f64) {
    let mut n = 0usize;
    let mut clusters = 0.0;
    let mut tracks = 0.0;
    for r in reports {
        for s in &r.scans {
            n += 1;
            clusters += s.n_clusters as f64;
            tracks += s.mean_tracks_per_cluster;
        }
    }
    (clusters / n.max(1) as f64, tracks / n.max(1) as f64)
}

/// Runs one variant and returns its reports plus summary.
pub fn run_variant(
    base: &RunConfig,
    variant: Variant,
    mc: usize,
) -> (Vec<RunReport>, VariantSummary) {
    let cfg = variant.configure(base);
    let (reports, failed) = run_batch(&cfg, mc);
    let summary = summarize_variant(variant.name(), &reports, failed);
    (reports, summary)
}

/// Parses a per-scan CSV back into rows keyed by column name.
pub fn parse_scan_csv(text: &str) -> Result<Vec<BTreeMap<String, f64>>, CliError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config("empty csv".into()))?;
    if header != CSV_HEADER {
        return Err(CliError::Schema {
            path: "<csv>".into(),
            message: format!("unexpected header {header}"),
        });
    }
    let cols: Vec<&str> = header.split(',').collect();
    let mut out = Vec::new();
    for line in lines {
        let mut row = BTreeMap::new();
        for (name, value) in cols.iter().zip(line.split(',')) {
            row.insert(
                name.to_string(),
                value
                    .parse::<f64>()
                    .map_err(|e| CliError::Config(format!("bad csv value {value}: {e}")))?,
            );
        }
        out.push(row);
    }
    Ok(out)
}
