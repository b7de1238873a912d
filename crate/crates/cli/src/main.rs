//! `bmfa` command-line entry point.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config, inputs),
//! 2 runtime or numeric failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bmfa::aggregation::StrategyId;
use bmfa::checkpoint::{read_checkpoint, write_checkpoint};
use bmfa::config::{RunConfig, Stamp};
use bmfa::evaluation::{
    det_metrics, embed_utterances, evaluate, read_embeddings, read_scores, read_trials, score_trials,
    write_embeddings, write_scores, DetMetrics,
};
use bmfa::frontend::{extract_features, read_wav};
use bmfa::gradcheck::{run_suite, GradCheckConfig};
use bmfa::manifest::{read_manifest, write_manifest, ManifestEntry};
use bmfa::tensor::write_tensor;
use bmfa::training::corpus::{corpus_paths, MANIFEST_ALL};
use bmfa::training::{gen_corpus, load_utterances, restore_model, train, write_corpus, write_metrics, Utterance};

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "model.ckpt";
const METRICS_FILE: &str = "metrics.txt";
const EMBEDDINGS_FILE: &str = "embeddings.txt";
const SCORES_FILE: &str = "scores.txt";

#[derive(Parser)]
#[command(name = "bmfa", version, about = "Multiscale-aggregation speaker embeddings: data, training, scoring")]
struct Cli {
    /// Worker threads for embedding extraction. Results do not depend on it.
    #[arg(long, global = true, env = "BMFA_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic speaker corpus (features, manifests, trials).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `corpus.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute FBank features for a manifest of 16-bit mono WAV files.
    ExtractFeatures {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Lines of `utt_id speaker_id path.wav`.
        #[arg(long)]
        wavs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes config, metrics, checkpoint and stamp to the run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory from gen-data (uses its training manifest).
        #[arg(long, required_unless_present = "manifest")]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        /// Overrides `train.seed`. A seed must come from here or the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// e.g. `baseline`, `bmfa+afm`, `mea_fpm+add`.
        #[arg(long)]
        strategy: Option<StrategyId>,
    },
    /// Write one embedding per manifest line using a trained run.
    Extract {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine-score a trial list against an embedding file.
    Score {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// EER and minDCF, from a score file or by embedding a manifest with a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, conflicts_with_all = ["manifest", "trials"])]
        scores: Option<PathBuf>,
        #[arg(long, requires = "trials")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        trials: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every registered op.
    Gradcheck {
        /// Substring of the op ids to run.
        #[arg(long)]
        filter: Option<String>,
        /// Negative control: perturb analytic gradients (every check must fail).
        #[arg(long)]
        corrupt: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate the eight-system comparison grid.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated; cells report the median over seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Restrict to some systems (comma-separated ids).
        #[arg(long, value_delimiter = ',')]
        systems: Vec<StrategyId>,
    },
}

/// Failure that should map to exit code 2 without being a library error.
#[derive(Debug)]
struct Failed;

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("check failed")
    }
}

impl std::error::Error for Failed {}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    bmfa::Error::Config(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .find_map(|e| e.downcast_ref::<bmfa::Error>())
        .is_some_and(bmfa::Error::is_validation);
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors embed their source in the message; skip repeats
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = if msg.is_empty() { c } else { format!("{msg}: {c}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(validation("--threads must be at least 1"));
    }
    let threads = cli.threads;
    match cli.cmd {
        Cmd::GenData { config, seed, out } => gen_data(config, seed, &out),
        Cmd::ExtractFeatures { config, wavs, out } => extract_feats(config, &wavs, &out),
        Cmd::Train {
            config,
            data,
            manifest,
            run,
            seed,
            steps,
            strategy,
        } => {
            let manifest = match (manifest, data) {
                (Some(m), _) => m,
                (None, Some(d)) => corpus_paths(&d).0,
                (None, None) => unreachable!("clap requires one of them"),
            };
            cmd_train(config, &manifest, &run, seed, steps, strategy)
        }
        Cmd::Extract { run, manifest, out } => {
            let out = out.unwrap_or_else(|| run.join(EMBEDDINGS_FILE));
            cmd_extract(&run, &manifest, &out, threads)
        }
        Cmd::Score {
            run,
            trials,
            embeddings,
            out,
        } => {
            let emb = embeddings.unwrap_or_else(|| run.join(EMBEDDINGS_FILE));
            let out = out.unwrap_or_else(|| run.join(SCORES_FILE));
            cmd_score(&run, &trials, &emb, &out)
        }
        Cmd::Eval {
            run,
            scores,
            manifest,
            trials,
        } => cmd_eval(&run, scores, manifest.zip(trials), threads),
        Cmd::Gradcheck { filter, corrupt, report } => cmd_gradcheck(filter.as_deref(), corrupt, report),
        Cmd::Compare {
            config,
            data,
            run,
            seeds,
            systems,
        } => cmd_compare(config, &data, &run, seeds, systems, threads),
    }
}

/// Config file if given, defaults otherwise; the flag says whether a train seed was set.
fn load_config(path: Option<&Path>) -> Result<(RunConfig, bool)> {
    match path {
        Some(p) => {
            let l = RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?;
            Ok((l.config, l.train_seed_given))
        }
        None => Ok((RunConfig::default(), false)),
    }
}

/// The config saved by `train` in a run directory.
fn run_config(run: &Path) -> Result<RunConfig> {
    let p = run.join(CONFIG_FILE);
    Ok(RunConfig::load(&p)
        .with_context(|| format!("reading {} (is this a training run directory?)", p.display()))?
        .config)
}

fn write_stamp(dir: &Path, command: &str, config: &RunConfig, seed: u64) -> Result<()> {
    Stamp::new(command, config, seed).write(dir.join(format!("stamp-{command}.json")))?;
    Ok(())
}

fn gen_data(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<()> {
    let (mut cfg, _) = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.corpus.seed = s;
    }
    cfg.validate()?;
    let corpus = gen_corpus(&cfg.corpus)?;
    fs::create_dir_all(out)?;
    write_corpus(&corpus, out)?;
    write_stamp(out, "gen-data", &cfg, cfg.corpus.seed)?;
    println!(
        "wrote {} utterances of {} speakers ({} train, {} held out) to {}",
        corpus.utterances.len(),
        corpus.n_speakers,
        corpus.train.len(),
        corpus.heldout.len(),
        out.display()
    );
    Ok(())
}

fn extract_feats(config: Option<PathBuf>, wavs: &Path, out: &Path) -> Result<()> {
    let (cfg, _) = load_config(config.as_deref())?;
    let entries = read_manifest(wavs)?;
    let feat_dir = out.join("features");
    fs::create_dir_all(&feat_dir)?;
    let mut written = Vec::new();
    for e in &entries {
        let wav = read_wav(&e.path).with_context(|| format!("reading {}", e.path.display()))?;
        match extract_features(&wav, &cfg.frontend) {
            Ok(f) => {
                let path = feat_dir.join(format!("{}.btf", e.utt_id));
                write_tensor(&path, &f.cast::<f32>())?;
                written.push(ManifestEntry {
                    utt_id: e.utt_id.clone(),
                    speaker_id: e.speaker_id.clone(),
                    path,
                });
            }
            Err(err @ (bmfa::Error::TooShort { .. } | bmfa::Error::EmptyAfterVad)) => {
                log::warn!("skipping {}: {err}", e.utt_id);
            }
            Err(err) => return Err(err).with_context(|| format!("utterance {}", e.utt_id)),
        }
    }
    if written.is_empty() {
        bail!(bmfa::Error::InvalidInput("no utterance produced features".into()));
    }
    write_manifest(out.join(MANIFEST_ALL), &written)?;
    write_stamp(out, "extract-features", &cfg, 0)?;
    println!("{} of {} utterances -> {}", written.len(), entries.len(), out.display());
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    manifest: &Path,
    run: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
    strategy: Option<StrategyId>,
) -> Result<()> {
    let (mut cfg, seed_given) = load_config(config.as_deref())?;
    match seed {
        Some(s) => cfg.train.seed = s,
        None if !seed_given => {
            return Err(validation("training needs a seed: set train.seed in the config or pass --seed"))
        }
        None => {}
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(id) = strategy {
        cfg.model = cfg.model.with_strategy(id);
    }
    cfg.validate()?;
    let (utts, n_classes) = load_utterances(manifest)?;
    fs::create_dir_all(run)?;
    fs::write(run.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    let history = train_and_save(&cfg, &utts, n_classes, run)?;
    write_stamp(run, "train", &cfg, cfg.train.seed)?;
    if let Some(last) = history.last() {
        println!(
            "trained {} for {} steps: loss {:.4}, batch accuracy {:.3}",
            cfg.model.strategy_id()?,
            history.len(),
            last.loss,
            last.accuracy
        );
    } else {
        println!("saved initial parameters (0 steps)");
    }
    Ok(())
}

/// Trains, then writes the metrics file and checkpoint into `dir`.
fn train_and_save(
    cfg: &RunConfig,
    utts: &[Utterance],
    n_classes: usize,
    dir: &Path,
) -> Result<Vec<bmfa::training::StepMetrics>> {
    let every = (cfg.train.steps / 10).max(1);
    let t = train(&cfg.model, &cfg.train, utts, n_classes, |m| {
        if (m.step + 1) % every == 0 {
            log::info!("step {:>5}  lr {:.2e}  loss {:.4}  acc {:.3}", m.step + 1, m.lr, m.loss, m.accuracy);
        }
    })?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
    write_metrics(&mut f, &t.history)?;
    f.flush()?;
    write_checkpoint(dir.join(CHECKPOINT_FILE), &t.store)?;
    Ok(t.history)
}

fn cmd_extract(run: &Path, manifest: &Path, out: &Path, threads: usize) -> Result<()> {
    let cfg = run_config(run)?;
    let (store, network, _) = restore_model(&cfg.model, &cfg.train, read_checkpoint(run.join(CHECKPOINT_FILE))?)?;
    let (utts, _) = load_utterances(manifest)?;
    let table = embed_utterances(&network, &store, &utts, threads)?;
    write_embeddings(out, &table)?;
    write_stamp(run, "extract", &cfg, cfg.train.seed)?;
    println!("{} embeddings of dimension {} -> {}", table.len(), cfg.model.embedding_dim, out.display());
    Ok(())
}

fn cmd_score(run: &Path, trials: &Path, emb: &Path, out: &Path) -> Result<()> {
    let cfg = run_config(run).unwrap_or_default();
    let table = read_embeddings(emb)?;
    let trials = read_trials(trials)?;
    let scores = score_trials(&table, &trials)?;
    write_scores(out, &trials, &scores)?;
    write_stamp(run, "score", &cfg, cfg.train.seed)?;
    println!("scored {} trials -> {}", trials.len(), out.display());
    Ok(())
}

fn print_metrics(m: &DetMetrics, n_trials: usize) {
    println!("trials   {n_trials}");
    println!("EER      {:.4}%", 100.0 * m.eer);
    println!("minDCF   {:.4}", m.min_dcf);
    println!("thr@EER  {:.6}", m.threshold_at_eer);
}

fn cmd_eval(run: &Path, scores: Option<PathBuf>, direct: Option<(PathBuf, PathBuf)>, threads: usize) -> Result<()> {
    let (metrics, n) = match direct {
        Some((manifest, trials_path)) => {
            let cfg = run_config(run)?;
            let (store, network, _) =
                restore_model(&cfg.model, &cfg.train, read_checkpoint(run.join(CHECKPOINT_FILE))?)?;
            let (utts, _) = load_utterances(&manifest)?;
            let trials = read_trials(&trials_path)?;
            let (m, scores) = evaluate(&network, &store, &utts, &trials, &cfg.eval, threads)?;
            write_scores(run.join(SCORES_FILE), &trials, &scores)?;
            write_stamp(run, "eval", &cfg, cfg.train.seed)?;
            (m, trials.len())
        }
        None => {
            // a bare score file needs no trained model; eval settings come from the run if present
            let cfg = run_config(run).unwrap_or_default();
            let path = scores.unwrap_or_else(|| run.join(SCORES_FILE));
            let (trials, scores) = read_scores(&path)?;
            let targets: Vec<bool> = trials.iter().map(|t| t.target).collect();
            let m = det_metrics(&scores, &targets, &cfg.eval)?;
            fs::create_dir_all(run)?;
            write_stamp(run, "eval", &cfg, cfg.train.seed)?;
            (m, trials.len())
        }
    };
    fs::write(run.join("eval.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    print_metrics(&metrics, n);
    Ok(())
}

fn cmd_gradcheck(filter: Option<&str>, corrupt: bool, report: Option<PathBuf>) -> Result<()> {
    let cfg = GradCheckConfig {
        corrupt_analytic: corrupt,
        ..GradCheckConfig::default()
    };
    let reports = run_suite(filter, &cfg)?;
    println!("{:<24} {:>12} {:>8}  {:<6} worst", "op", "max rel err", "coords", "result");
    for r in &reports {
        println!(
            "{:<24} {:>12.3e} {:>8}  {:<6} {}",
            r.op,
            r.max_rel_error,
            r.coords_checked,
            if r.passed { "ok" } else { "FAIL" },
            r.worst
        );
    }
    if let Some(p) = report {
        fs::write(p, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checked, {failed} failed (tolerance {:e})", reports.len(), cfg.tolerance);
    if failed > 0 {
        return Err(anyhow::Error::new(Failed).context(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cmd_compare(
    config: Option<PathBuf>,
    data: &Path,
    run: &Path,
    mut seeds: Vec<u64>,
    systems: Vec<StrategyId>,
    threads: usize,
) -> Result<()> {
    let (cfg, seed_given) = load_config(config.as_deref())?;
    if seeds.is_empty() {
        if !seed_given {
            return Err(validation("compare needs seeds: set train.seed or pass --seeds"));
        }
        seeds.push(cfg.train.seed);
    }
    let systems = if systems.is_empty() {
        StrategyId::comparison_grid()
    } else {
        systems
    };
    let (train_manifest, heldout_manifest, trials_path) = corpus_paths(data);
    let (train_utts, n_classes) = load_utterances(&train_manifest)?;
    let (held, _) = load_utterances(&heldout_manifest)?;
    let trials = read_trials(&trials_path)?;
    fs::create_dir_all(run)?;

    let mut rows = Vec::new();
    for id in &systems {
        let (mut eers, mut dcfs) = (Vec::new(), Vec::new());
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.model = c.model.with_strategy(*id);
            if id.strategy != bmfa::aggregation::Strategy::Bmfa {
                c.model.lowest_stage = 1;
                c.model.branches = Default::default();
            }
            c.train.seed = seed;
            c.validate()?;
            let dir = run.join(format!("{id}-seed{seed}"));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(CONFIG_FILE), c.to_json() + "\n")?;
            log::info!("training {id} (seed {seed})");
            train_and_save(&c, &train_utts, n_classes, &dir)?;
            let (store, network, _) = restore_model(&c.model, &c.train, read_checkpoint(dir.join(CHECKPOINT_FILE))?)?;
            let (m, scores) = evaluate(&network, &store, &held, &trials, &c.eval, threads)?;
            write_scores(dir.join(SCORES_FILE), &trials, &scores)?;
            log::info!("{id} seed {seed}: EER {:.4}% minDCF {:.4}", 100.0 * m.eer, m.min_dcf);
            eers.push(m.eer);
            dcfs.push(m.min_dcf);
        }
        rows.push((*id, median(eers), median(dcfs)));
    }

    let seeds_txt: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let mut table = format!(
        "# median over seeds {}; {} trials\n{:<16} {:>8} {:>8}\n",
        seeds_txt.join(","),
        trials.len(),
        "system",
        "EER(%)",
        "minDCF"
    );
    for (id, eer, dcf) in &rows {
        table.push_str(&format!("{:<16} {:>8.3} {:>8.4}\n", id.to_string(), 100.0 * eer, dcf));
    }
    fs::write(run.join("compare.txt"), &table)?;
    write_stamp(run, "compare", &cfg, seeds[0])?;
    print!("{table}");
    Ok(())
}
