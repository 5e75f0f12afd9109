use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crfmot::association::{track, validate_links, validate_trackset, Providers};
use crfmot::config::RunConfig;
use crfmot::evalsim::mot::{
    detections_to_rows, rows_to_detections, rows_to_trackset, trackset_to_rows, write_atomic, write_mot,
};
use crfmot::evalsim::{
    ablation_table, evaluate, frame_range, generate_scene, read_mot, restrict_frames, run_ablation, AblationSummary,
    MotRole,
};
use crfmot::learning::{
    attach_identities, decoded_accuracy, load_model, save_model, sequence_windows, train, Model, Schedule,
    TrainingWindow,
};
use crfmot::synthetic::{oracle_check, OracleRow, PlantedConfig};
use crfmot::{Error, Execution};

#[derive(Parser)]
#[command(name = "crfmot", version, about = "Tracklet association with a relaxed CRF")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Configuration file of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct ModelFlags {
    /// Directory holding unary.txt, pairwise.txt and params.txt.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    unary: Option<PathBuf>,
    #[arg(long)]
    pairwise: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scene and write gt.txt, det.txt and config.txt.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        targets: Option<usize>,
        #[arg(long)]
        frames: Option<u32>,
    },
    /// Track a detection file.
    Track {
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        /// Directory for per-window energy traces.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Score a result file against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        /// Also write the report as a one-row CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit the CRF parameters and both providers.
    Train {
        /// Output directory for the fitted model files and the epoch log.
        #[arg(long)]
        out: PathBuf,
        /// Labeled sequence directories, each with det.txt and gt.txt.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Validation sequence directories; the training set is reused when absent.
        #[arg(long, num_args = 1..)]
        val: Vec<PathBuf>,
        /// Simulated training scenes, e.g. 1000..1006 or 3,5,8.
        #[arg(long)]
        train_seeds: Option<String>,
        #[arg(long)]
        val_seeds: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        /// Shuffling seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        init: ModelFlags,
    },
    /// Compare decoded inference with exhaustive minimization.
    OracleCheck {
        #[arg(long, default_value = "4,8,12")]
        sizes: String,
        #[arg(long, default_value = "0..50")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track simulated scenes in unary and CRF mode and compare.
    Ablate {
        #[arg(long, default_value = "0..20")]
        seeds: String,
        /// Keeps gt and result files of every scene.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        msg: msg.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::SizeLimit { .. } => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::MalformedInput(_) => 2,
            Error::Numeric(_) | Error::Contract(_) => 3,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

/// `a..b` or a comma list.
fn parse_seeds(s: &str) -> Outcome<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let r: Range<u64> = a.trim().parse().map_err(|_| usage(format!("bad range {s:?}")))?
            ..b.trim().parse().map_err(|_| usage(format!("bad range {s:?}")))?;
        return Ok(r.collect());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| usage(format!("bad seed list {s:?}"))))
        .collect()
}

fn parse_sizes(s: &str) -> Outcome<Vec<usize>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| usage(format!("bad size list {s:?}"))))
        .collect()
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p).map_err(|e| match e {
            Error::Parse { .. } => usage(e.to_string()),
            other => Failure::from(other),
        })?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(|e| usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn set(cfg: &mut RunConfig, key: &str, value: impl ToString) -> Outcome<()> {
    cfg.set(key, &value.to_string()).map_err(|e| usage(e.to_string()))
}

fn apply_model_flags(cfg: &mut RunConfig, f: &ModelFlags) -> Outcome<()> {
    if let Some(dir) = &f.model {
        for (key, file) in [
            ("provider.unary", "unary.txt"),
            ("provider.pairwise", "pairwise.txt"),
            ("provider.params", "params.txt"),
        ] {
            set(cfg, key, dir.join(file).display())?;
        }
    }
    for (key, p) in [
        ("provider.unary", &f.unary),
        ("provider.pairwise", &f.pairwise),
        ("provider.params", &f.params),
    ] {
        if let Some(p) = p {
            set(cfg, key, p.display())?;
        }
    }
    Ok(())
}

fn model_from(cfg: &RunConfig) -> Outcome<Model> {
    Ok(load_model(
        cfg.unary_provider.as_deref(),
        cfg.pairwise_provider.as_deref(),
        cfg.params_file.as_deref(),
        &cfg.params,
    )?)
}

fn create_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", dir.display()),
    })
}

fn cmd_synth(
    mut cfg: RunConfig,
    out: &Path,
    seed: Option<u64>,
    targets: Option<usize>,
    frames: Option<u32>,
) -> Outcome<()> {
    if let Some(s) = seed {
        set(&mut cfg, "scene.seed", s)?;
    }
    if let Some(t) = targets {
        set(&mut cfg, "scene.n_targets", t)?;
    }
    if let Some(f) = frames {
        set(&mut cfg, "scene.n_frames", f)?;
    }
    cfg.validate()?;
    let scene = generate_scene(&cfg.scene)?;
    let gt = write_mot(&trackset_to_rows(&scene.gt, MotRole::GroundTruth));
    let det = write_mot(&detections_to_rows(&scene.detections));
    create_dir(out)?;
    write_atomic(&out.join("gt.txt"), &gt)?;
    write_atomic(&out.join("det.txt"), &det)?;
    write_atomic(&out.join("config.txt"), &cfg.to_text())?;
    println!(
        "wrote {} gt boxes and {} detections to {}",
        scene.gt.box_count(),
        scene.detections.len(),
        out.display()
    );
    Ok(())
}

fn cmd_track(
    mut cfg: RunConfig,
    det: &Path,
    out: &Path,
    mode: Option<&str>,
    trace_dir: Option<&Path>,
    mf: &ModelFlags,
) -> Outcome<()> {
    if let Some(m) = mode {
        set(&mut cfg, "mode", m)?;
    }
    apply_model_flags(&mut cfg, mf)?;
    cfg.validate()?;
    let model = model_from(&cfg)?;
    let detections = rows_to_detections(&read_mot(det, MotRole::Detections)?)?;
    let mut assoc = cfg.association();
    assoc.params = model.params.clone();
    let providers = Providers {
        unary: &model.unary,
        pairwise: &model.pairwise,
    };
    let output = track(detections, &assoc, providers, Execution::Parallel)?;
    for round in &output.rounds {
        validate_links(&round.nodes, &round.labels)?;
    }
    validate_trackset(&output.tracks)?;
    if let Some(dir) = trace_dir {
        create_dir(dir)?;
        for (r, round) in output.rounds.iter().enumerate() {
            for (k, t) in round.traces.iter().enumerate() {
                write_atomic(&dir.join(format!("round{}_window{k:04}.csv", r + 1)), &t.to_csv())?;
            }
        }
    }
    write_atomic(out, &write_mot(&trackset_to_rows(&output.tracks, MotRole::Results)))?;
    println!(
        "{} tracklets, {} tracks, {} boxes ({} mode)",
        output.tracklets.len(),
        output.tracks.len(),
        output.tracks.box_count(),
        cfg.mode
    );
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, gt: &Path, results: &Path, iou: Option<f64>, csv: Option<&Path>) -> Outcome<()> {
    if let Some(v) = iou {
        set(&mut cfg, "eval.iou_threshold", v)?;
    }
    cfg.validate()?;
    let mut gt = rows_to_trackset(&read_mot(gt, MotRole::GroundTruth)?, MotRole::GroundTruth)?;
    let mut res = rows_to_trackset(&read_mot(results, MotRole::Results)?, MotRole::Results)?;
    if let (Some((g0, g1)), Some((r0, r1))) = (frame_range(&gt), frame_range(&res)) {
        if (g0, g1) != (r0, r1) {
            let (lo, hi) = (g0.max(r0), g1.min(r1));
            eprintln!("warning: gt covers frames {g0}..={g1}, results {r0}..={r1}; scoring {lo}..={hi}");
            gt = restrict_frames(&gt, lo, hi);
            res = restrict_frames(&res, lo, hi);
        }
    }
    let report = evaluate(&gt, &res, cfg.iou_threshold);
    print!("{}", report.to_text());
    if let Some(p) = csv {
        let text = format!(
            "{}\n{}\n",
            crfmot::evalsim::MetricsReport::csv_header(),
            report.to_csv_row()
        );
        write_atomic(p, &text)?;
    }
    Ok(())
}

fn sequence_dir_windows(dir: &Path, cfg: &RunConfig, model: &Model) -> Outcome<Vec<TrainingWindow>> {
    let mut dets = rows_to_detections(&read_mot(&dir.join("det.txt"), MotRole::Detections)?)?;
    let gt = rows_to_trackset(
        &read_mot(&dir.join("gt.txt"), MotRole::GroundTruth)?,
        MotRole::GroundTruth,
    )?;
    attach_identities(&mut dets, &gt, cfg.iou_threshold);
    Ok(sequence_windows(
        dets,
        &cfg.link,
        model,
        &cfg.difficult,
        &cfg.features,
        Execution::Parallel,
    )?)
}

fn seed_windows(seeds: &[u64], cfg: &RunConfig, model: &Model) -> Outcome<Vec<TrainingWindow>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let scene = generate_scene(&crfmot::evalsim::SceneConfig {
            seed,
            ..cfg.scene.clone()
        })?;
        out.extend(sequence_windows(
            scene.detections,
            &cfg.link,
            model,
            &cfg.difficult,
            &cfg.features,
            Execution::Parallel,
        )?);
    }
    Ok(out)
}

struct TrainArgs<'a> {
    out: &'a Path,
    data: &'a [PathBuf],
    val: &'a [PathBuf],
    train_seeds: Option<&'a str>,
    val_seeds: Option<&'a str>,
    schedule: Schedule,
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs<'_>, init: &ModelFlags) -> Outcome<()> {
    apply_model_flags(&mut cfg, init)?;
    cfg.validate()?;
    if a.data.is_empty() && a.train_seeds.is_none() {
        return Err(usage("no training data: pass --data DIR... or --train-seeds"));
    }
    let model = model_from(&cfg)?;
    let mut train_set = Vec::new();
    for d in a.data {
        train_set.extend(sequence_dir_windows(d, &cfg, &model)?);
    }
    if let Some(s) = a.train_seeds {
        train_set.extend(seed_windows(&parse_seeds(s)?, &cfg, &model)?);
    }
    let mut val_set = Vec::new();
    for d in a.val {
        val_set.extend(sequence_dir_windows(d, &cfg, &model)?);
    }
    if let Some(s) = a.val_seeds {
        val_set.extend(seed_windows(&parse_seeds(s)?, &cfg, &model)?);
    }
    if train_set.is_empty() {
        return Err(usage("training data produced no windows"));
    }
    if val_set.is_empty() {
        eprintln!("note: no validation data given, validating on the training set");
        val_set = train_set.clone();
    }
    let acc0 = decoded_accuracy(&val_set, &model, Execution::Parallel);
    let result = train(&train_set, &val_set, &model, &a.schedule, Execution::Parallel)?;
    let acc1 = decoded_accuracy(&val_set, &result.model, Execution::Parallel);
    save_model(&result.model, a.out, cfg.features.appearance_dim)?;
    write_atomic(&a.out.join("train_log.csv"), &result.log_csv())?;
    println!(
        "{} training and {} validation windows, {} epochs",
        train_set.len(),
        val_set.len(),
        result.log.len()
    );
    println!(
        "validation loss {:.6} -> {:.6}, accuracy {:.4} -> {:.4}",
        result.initial_val_loss, result.best_val_loss, acc0, acc1
    );
    let p = &result.model.params;
    println!("w_u={} w_d={} gamma={}", p.w_u, p.w_d, p.gamma);
    Ok(())
}

fn cmd_oracle_check(cfg: RunConfig, sizes: &str, seeds: &str, out: &Path) -> Outcome<()> {
    cfg.validate()?;
    let sizes = parse_sizes(sizes)?;
    let seeds = parse_seeds(seeds)?;
    let rows = oracle_check(
        &sizes,
        &seeds,
        &PlantedConfig::default(),
        &cfg.params,
        Execution::Parallel,
    )?;
    let mut text = String::from(OracleRow::CSV_HEADER);
    text.push('\n');
    for r in &rows {
        let _ = writeln!(text, "{}", r.to_csv_row());
    }
    write_atomic(out, &text)?;
    let n = rows.len().max(1) as f64;
    let agree = rows.iter().filter(|r| r.agree).count();
    let gap = rows.iter().map(|r| r.gap).sum::<f64>() / n;
    println!(
        "{} instances, agreement {}/{} ({:.1}%), mean relative gap {:.5}",
        rows.len(),
        agree,
        rows.len(),
        100.0 * agree as f64 / n,
        gap
    );
    Ok(())
}

fn cmd_ablate(mut cfg: RunConfig, seeds: &str, out_dir: Option<&Path>, mf: &ModelFlags) -> Outcome<()> {
    apply_model_flags(&mut cfg, mf)?;
    cfg.validate()?;
    let model = model_from(&cfg)?;
    let seeds = parse_seeds(seeds)?;
    if let Some(d) = out_dir {
        create_dir(d)?;
    }
    let mut assoc = cfg.association();
    assoc.params = model.params.clone();
    let providers = Providers {
        unary: &model.unary,
        pairwise: &model.pairwise,
    };
    let rows = run_ablation(
        &seeds,
        &cfg.scene,
        &assoc,
        providers,
        cfg.iou_threshold,
        Execution::Parallel,
        out_dir,
    )?;
    print!("{}", ablation_table(&rows));
    let s = AblationSummary::from_rows(&rows);
    println!(
        "ids crf <= unary: {}, mota crf >= unary: {}, strict wins >= 60%: {}",
        s.ids_not_worse(),
        s.mota_not_worse(),
        s.wins_enough()
    );
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Failure {
                code: 3,
                msg: e.to_string(),
            })?;
    }
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Synth {
            out,
            seed,
            targets,
            frames,
        } => cmd_synth(cfg, out, *seed, *targets, *frames),
        Cmd::Track {
            det,
            out,
            mode,
            trace_dir,
            model,
        } => cmd_track(cfg, det, out, mode.as_deref(), trace_dir.as_deref(), model),
        Cmd::Eval { gt, results, iou, csv } => cmd_eval(cfg, gt, results, *iou, csv.as_deref()),
        Cmd::Train {
            out,
            data,
            val,
            train_seeds,
            val_seeds,
            lr,
            epochs,
            batch,
            patience,
            seed,
            init,
        } => {
            let d = Schedule::default();
            let schedule = Schedule {
                learning_rate: lr.unwrap_or(d.learning_rate),
                epochs: epochs.unwrap_or(d.epochs),
                batch: batch.unwrap_or(d.batch),
                patience: patience.unwrap_or(d.patience),
                seed: seed.unwrap_or(d.seed),
            };
            let args = TrainArgs {
                out,
                data,
                val,
                train_seeds: train_seeds.as_deref(),
                val_seeds: val_seeds.as_deref(),
                schedule,
            };
            cmd_train(cfg, args, init)
        }
        Cmd::OracleCheck { sizes, seeds, out } => cmd_oracle_check(cfg, sizes, seeds, out),
        Cmd::Ablate { seeds, out_dir, model } => cmd_ablate(cfg, seeds, out_dir.as_deref(), model),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg.lines().next().unwrap_or(""));
            ExitCode::from(f.code)
        }
    }
}
