use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plotfuse::config::{parse_run_config, parse_synth_config};
use plotfuse::formats::{
    parse_groundtruth, parse_submission, read_text, write_atomic, write_submission, LogitCache,
};
use plotfuse::pipeline::{
    infer_quadrat, select, world_quadrats, CachedSource, RunConfig, ToyBackbone,
};
use plotfuse::selection::SelectionError;
use plotfuse::store::{load_world, save_world, GROUNDTRUTH_CSV};
use plotfuse::{gen_world, load_taxonomy, score, Error, Result, World};

/// Worker-count override for the inference thread pool.
const WORKERS_ENV: &str = "PLOTFUSE_WORKERS";

#[derive(Parser)]
#[command(
    name = "plotfuse",
    version,
    about = "Multi-label quadrat species prediction from tile classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world directory.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the `seed` key of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run inference over a world and write a submission.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Logit cache; read if present, updated with newly computed entries.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Serve logits from the cache only; fail if any are missing.
        #[arg(long, requires = "cache")]
        offline: bool,
    },
    /// Score a submission against ground truth.
    Eval {
        #[arg(long)]
        submission: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// JSON report path [default: submission path with `.report.json`].
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a range of mean-length targets in one inference pass.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<f64>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load and validate a taxonomy CSV.
    TaxonomyValidate { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_workers() {
        return fail(&e);
    }
    let result = match cli.command {
        Command::Gen { config, out, seed } => cmd_gen(&config, &out, seed),
        Command::Infer {
            config,
            world,
            out,
            cache,
            offline,
        } => cmd_infer(&config, &world, &out, cache.as_deref(), offline),
        Command::Eval {
            submission,
            groundtruth,
            report,
        } => cmd_eval(&submission, &groundtruth, report),
        Command::Sweep {
            config,
            world,
            targets,
            out,
        } => cmd_sweep(&config, &world, &targets, out.as_deref()),
        Command::TaxonomyValidate { path } => cmd_taxonomy_validate(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.kind());
    ExitCode::from(2)
}

/// Print to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write as _;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "{WORKERS_ENV} must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&path.display().to_string(), &read_text(path)?)
}

fn cmd_gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = parse_synth_config(&config.display().to_string(), &read_text(config)?)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let world = gen_world(&cfg)?;
    save_world(&world, out)?;
    let tax = &world.taxonomy;
    let transects: std::collections::BTreeSet<&str> = world
        .quadrats
        .iter()
        .map(|q| q.transect_id.as_str())
        .collect();
    emit(&format!(
        "species={} genera={} families={} quadrats={} transects={}\n",
        tax.n_species(),
        tax.n_genera(),
        tax.n_families(),
        world.quadrats.len(),
        transects.len()
    ));
    Ok(())
}

/// Candidate sets for every quadrat, reading and extending `cache_path`.
fn infer_world(
    world: &World,
    cfg: &RunConfig,
    cache_path: Option<&Path>,
    offline: bool,
) -> Result<Vec<plotfuse::CandidateSet>> {
    use rayon::prelude::*;

    let cache = match cache_path {
        Some(p) if p.exists() => LogitCache::parse_csv(&p.display().to_string(), &read_text(p)?)?,
        Some(p) if offline => {
            return Err(
                plotfuse::formats::FormatError::io(p, std::io::ErrorKind::NotFound.into()).into(),
            )
        }
        _ => LogitCache::new(),
    };
    let toy = ToyBackbone::new(world, &cfg.models)?;
    let source = CachedSource::new(&cache, if offline { None } else { Some(&toy) });
    let candidates = world
        .quadrats
        .par_iter()
        .map(|q| infer_quadrat(&q.quadrat_id, cfg, &world.taxonomy, &source))
        .collect::<Result<Vec<_>>>()?;
    let fresh = source.into_fresh();
    if let Some(p) = cache_path {
        if !fresh.is_empty() {
            let mut merged = cache;
            merged.extend(fresh);
            write_atomic(p, merged.to_csv().as_bytes())?;
        }
    }
    Ok(candidates)
}

fn cmd_infer(
    config: &Path,
    world_dir: &Path,
    out: &Path,
    cache: Option<&Path>,
    offline: bool,
) -> Result<()> {
    let cfg = load_run_config(config)?;
    let world = load_world(world_dir)?;
    let candidates = infer_world(&world, &cfg, cache, offline)?;
    let output = select(candidates, &world_quadrats(&world), &cfg.selection)?;
    write_atomic(
        out,
        write_submission(&output.predictions, &world.taxonomy).as_bytes(),
    )?;
    eprintln!(
        "quadrats={} tau={} mean_len={:.4}",
        output.predictions.len(),
        output.tau,
        output.mean_len
    );
    Ok(())
}

fn cmd_eval(submission: &Path, groundtruth: &Path, report: Option<PathBuf>) -> Result<()> {
    let sub = parse_submission(&submission.display().to_string(), &read_text(submission)?)?;
    let gt = parse_groundtruth(&groundtruth.display().to_string(), &read_text(groundtruth)?)?;
    let rep = score(sub.iter().map(|(q, s)| (q.as_str(), s)), &gt)?;
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    let report = report.unwrap_or_else(|| submission.with_extension("report.json"));
    let mut json = serde_json::to_vec_pretty(&rep)
        .map_err(|e| Error::Config(format!("serialising report: {e}")))?;
    json.push(b'\n');
    write_atomic(&report, &json)?;
    let mut text = format!("final {:.5}\n", rep.final_score);
    for (t, s) in &rep.per_transect {
        text.push_str(&format!("transect {t} {s:.5}\n"));
    }
    emit(&text);
    Ok(())
}

fn cmd_sweep(config: &Path, world_dir: &Path, targets: &[f64], out: Option<&Path>) -> Result<()> {
    let cfg = load_run_config(config)?;
    if cfg.selection.min_logit.is_some() {
        return Err(Error::Config(
            "sweep calibrates the threshold; remove `min_logit`".into(),
        ));
    }
    let min_len = cfg.selection.min_len as f64;
    if let Some(&t) = targets.iter().find(|&&t| t.is_nan() || t < min_len) {
        return Err(SelectionError::TargetBelowMinLen {
            target: t,
            min_len: cfg.selection.min_len,
        }
        .into());
    }
    let world = load_world(world_dir)?;
    let gt_path = world_dir.join(GROUNDTRUTH_CSV);
    let gt = parse_groundtruth(&gt_path.display().to_string(), &read_text(&gt_path)?)?;
    let candidates = infer_world(&world, &cfg, None, false)?;
    let metas = world_quadrats(&world);

    let mut sorted = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut table = String::from("target,tau,mean_len,score\n");
    for target in sorted {
        let mut sel = cfg.selection.clone();
        sel.target_mean_len = Some(target);
        match select(candidates.clone(), &metas, &sel) {
            Ok(output) => {
                let labels: Vec<(String, std::collections::BTreeSet<u64>)> = output
                    .predictions
                    .iter()
                    .map(|p| {
                        let ids = p
                            .species
                            .iter()
                            .map(|&s| world.taxonomy.species_label(s).expect("dense id"));
                        (p.quadrat_id.clone(), ids.collect())
                    })
                    .collect();
                let rep = score(labels.iter().map(|(q, s)| (q.as_str(), s)), &gt)?;
                table.push_str(&format!(
                    "{target},{:.9e},{:.6},{:.5}\n",
                    output.tau, output.mean_len, rep.final_score
                ));
            }
            Err(Error::Selection(SelectionError::Unattainable { max_achievable, .. })) => {
                table.push_str(&format!("{target},unattainable,{max_achievable:.6},\n"));
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(p) = out {
        write_atomic(p, table.as_bytes())?;
    }
    emit(&table);
    Ok(())
}

fn cmd_taxonomy_validate(path: &Path) -> Result<()> {
    let tax = load_taxonomy(path)?;
    emit(&format!(
        "ok species={} genera={} families={}\n",
        tax.n_species(),
        tax.n_genera(),
        tax.n_families()
    ));
    Ok(())
}
