//! `eak`: command-line driver for the emotion-atlas pipeline. Every
//! subcommand reads and writes files only; logs go to standard error.

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eak_core::blocks::Condition;
use eak_core::features::NormScope;
use eak_core::rfe::SubsetRule;
use eak_core::stats::Connectivity;

use config::{default_preprocess_band, parse_band, parse_list, parse_schedule, Config};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "eak",
    version,
    about = "Emotion-atlas construction and group analysis for block-design fMRI"
)]
struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true, env = "EAK_THREADS")]
    threads: Option<usize>,
    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// Master seed; required for every randomized stage.
    #[arg(long)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic block-design task dataset.
    SynthTask {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        subjects: Option<usize>,
        /// Amplitude of every planted activation.
        #[arg(long)]
        amplitude: Option<f64>,
    },
    /// Generate a synthetic two-group resting-state dataset.
    SynthRest {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        /// Effect size of every planted ALFF region (0 for a null dataset).
        #[arg(long)]
        effect: Option<f64>,
        #[arg(long)]
        group_a: Option<usize>,
        #[arg(long)]
        group_b: Option<usize>,
    },
    /// Split every run of a task dataset into blocks and write them as JSON.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the stimulus-vs-recovery feature matrices of both conditions.
    Features {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_scope)]
        scope: Option<NormScope>,
        /// Band-pass runs to 0.01-0.1 Hz first.
        #[arg(long)]
        bandpass: bool,
        /// Voxel-level features inside this region instead of region means.
        #[arg(long)]
        region: Option<u32>,
    },
    /// SVM-RFE on a feature matrix, or two-stage selection on a task dataset.
    Rfe {
        /// Feature matrix cache (`features_*.json`).
        #[arg(long, conflicts_with_all = ["data", "condition"])]
        matrix: Option<PathBuf>,
        /// Task dataset for region-then-voxel selection.
        #[arg(long, requires = "condition")]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_condition)]
        condition: Option<Condition>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        folds: Option<usize>,
        /// `one` or `fraction:<f>`.
        #[arg(long, value_parser = parse_schedule)]
        schedule: Option<eak_core::rfe::EliminationSchedule>,
        #[arg(long, value_parser = parse_subset_rule)]
        subset_rule: Option<SubsetRule>,
    },
    /// Retain voxels whose series correlate with a sub-ROI above a threshold.
    FcExpand {
        #[arg(long)]
        data: PathBuf,
        /// `selection.json` written by `rfe --data`.
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Append recovery windows to the reference series.
        #[arg(long)]
        include_rest: bool,
    },
    /// Combine sub-ROIs and expanded voxels into an atlas file.
    AtlasBuild {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        expansion: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-subject ALFF maps, inside an atlas or over all labelled voxels.
    Alff {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        atlas: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// ALFF band `lo,hi` in Hz.
        #[arg(long, value_parser = parse_band)]
        band: Option<eak_core::stats::Band>,
        /// Gaussian smoothing FWHM in mm before ALFF.
        #[arg(long)]
        fwhm: Option<f64>,
    },
    /// Two-sample t-test of ALFF maps with FDR and cluster report.
    GroupStats {
        #[arg(long)]
        maps: PathBuf,
        /// Subject-id prefix of group A (positive t means A > B).
        #[arg(long)]
        group_a: String,
        #[arg(long)]
        group_b: String,
        /// Dataset directory whose parcellation names the cluster regions.
        #[arg(long)]
        parcellation_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long, value_parser = parse_connectivity)]
        connectivity: Option<Connectivity>,
    },
    /// Cost-sensitive RBF grid search on atlas features.
    Classify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "atlas", required = true)]
        atlases: Vec<PathBuf>,
        #[arg(long)]
        group_a: String,
        #[arg(long)]
        group_b: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<eak_core::classify::FeatureMode>,
        #[arg(long, value_parser = parse_list)]
        c_grid: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_list)]
        gamma_grid: Option<Vec<f64>>,
        /// Cost multiplier of group A errors (default n_B / n_A).
        #[arg(long)]
        weight_pos: Option<f64>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Markdown summary of result files.
    Report {
        #[arg(long = "atlas")]
        atlases: Vec<PathBuf>,
        #[arg(long = "clusters")]
        clusters: Vec<PathBuf>,
        #[arg(long = "grid")]
        grids: Vec<PathBuf>,
        #[arg(long = "selection")]
        selections: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_scope(s: &str) -> Result<NormScope, String> {
    match s {
        "block" => Ok(NormScope::Block),
        "window" => Ok(NormScope::Window),
        _ => Err(format!("scope must be block or window, got {s:?}")),
    }
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    s.parse()
}

fn parse_subset_rule(s: &str) -> Result<SubsetRule, String> {
    match s {
        "min_hinge_loss" => Ok(SubsetRule::MinHingeLoss),
        "fewest" => Ok(SubsetRule::Fewest),
        _ => Err(format!("subset rule must be min_hinge_loss or fewest, got {s:?}")),
    }
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    s.parse::<u8>().map_err(|e| e.to_string()).and_then(Connectivity::try_from)
}

fn parse_mode(s: &str) -> Result<eak_core::classify::FeatureMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("mode must be alff_per_unit, mean_activation_per_unit or fc_upper_triangle, got {s:?}"))
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    use commands as c;
    match cli.command {
        Command::SynthTask {
            out,
            seed,
            subjects,
            amplitude,
        } => {
            if let Some(n) = subjects {
                cfg.synth.n_subjects = n;
            }
            if let Some(a) = amplitude {
                cfg.synth.planted_active_regions.iter_mut().for_each(|p| p.amplitude = a);
            }
            c::synth_task(&cfg, &out, seed.seed)
        }
        Command::SynthRest {
            out,
            seed,
            effect,
            group_a,
            group_b,
        } => {
            if let Some(e) = effect {
                cfg.synth.planted_alff_regions.iter_mut().for_each(|p| p.effect = e);
            }
            if let Some(n) = group_a {
                cfg.synth.n_group_a = n;
            }
            if let Some(n) = group_b {
                cfg.synth.n_group_b = n;
            }
            c::synth_rest(&cfg, &out, seed.seed)
        }
        Command::Split { data, out } => c::split(&data, &out),
        Command::Features {
            data,
            out,
            scope,
            bandpass,
            region,
        } => {
            if let Some(s) = scope {
                cfg.features.scope = s;
            }
            if bandpass {
                cfg.features.bandpass = Some(default_preprocess_band());
            }
            c::features(&cfg, &data, &out, region)
        }
        Command::Rfe {
            matrix,
            data,
            condition,
            out,
            seed,
            folds,
            schedule,
            subset_rule,
        } => {
            if let Some(k) = folds {
                cfg.rfe.folds = k;
            }
            if let Some(s) = schedule {
                cfg.rfe.roi_schedule = s;
                cfg.rfe.voxel_schedule = s;
            }
            if let Some(r) = subset_rule {
                cfg.rfe.subset_rule = r;
            }
            match (matrix, data, condition) {
                (Some(m), _, _) => c::rfe_matrix(&cfg, &m, &out, seed.seed),
                (None, Some(d), Some(cond)) => c::rfe_two_stage(&cfg, &d, cond, &out, seed.seed),
                _ => Err(CliError::config("rfe needs --matrix or --data with --condition")),
            }
        }
        Command::FcExpand {
            data,
            selection,
            out,
            threshold,
            include_rest,
        } => {
            if let Some(t) = threshold {
                cfg.atlas.fc_threshold = t;
            }
            if include_rest {
                cfg.atlas.reference.include_rest = true;
            }
            c::fc_expand_cmd(&cfg, &data, &selection, &out)
        }
        Command::AtlasBuild {
            data,
            selection,
            expansion,
            name,
            out,
        } => c::atlas_build(&cfg, &data, &selection, &expansion, &name, &out),
        Command::Alff {
            data,
            atlas,
            out,
            band,
            fwhm,
        } => {
            if let Some(b) = band {
                cfg.alff.band = b;
            }
            if let Some(f) = fwhm {
                cfg.alff.smooth_fwhm_mm = Some([f; 3]);
            }
            c::alff(&cfg, &data, atlas.as_deref(), &out)
        }
        Command::GroupStats {
            maps,
            group_a,
            group_b,
            parcellation_dir,
            out,
            q,
            connectivity,
        } => {
            if let Some(q) = q {
                cfg.stats.fdr_q = q;
            }
            if !(cfg.stats.fdr_q > 0.0 && cfg.stats.fdr_q < 1.0) {
                return Err(CliError::config(format!("q must lie in (0, 1), got {}", cfg.stats.fdr_q)));
            }
            if let Some(k) = connectivity {
                cfg.stats.connectivity = k;
            }
            c::group_stats(&cfg, &maps, &group_a, &group_b, parcellation_dir.as_deref(), &out)
        }
        Command::Classify {
            data,
            atlases,
            group_a,
            group_b,
            out,
            seed,
            mode,
            c_grid,
            gamma_grid,
            weight_pos,
            folds,
        } => {
            let g = &mut cfg.classify.grid;
            if let Some(m) = mode {
                cfg.classify.mode = m;
            }
            if let Some(v) = c_grid {
                g.c_grid = v;
            }
            if let Some(v) = gamma_grid {
                g.gamma_grid = v;
            }
            if let Some(w) = weight_pos {
                g.class_weights = Some((w, 1.0));
            }
            if let Some(k) = folds {
                g.folds = k;
            }
            c::classify(&cfg, &data, &atlases, &group_a, &group_b, &out, seed.seed)
        }
        Command::Report {
            atlases,
            clusters,
            grids,
            selections,
            out,
        } => c::report(&atlases, &clusters, &grids, &selections, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            log::error!("--threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::error!("cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
