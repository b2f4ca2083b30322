use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kinet::actmap::{activation_maps, write_maps};
use kinet::checkpoint::Checkpoint;
use kinet::checks::{self, Target};
use kinet::config::{RunConfig, TeacherKind, SECTIONS};
use kinet::distill::{
    synthetic_teacher, write_if_changed, write_label_cache, FileTeacher, TeacherProvider, LABEL_MANIFEST,
};
use kinet::gradcheck::CheckOptions;
use kinet::netcore::build_model;
use kinet::pipeline::{frame_file, pseudo_label_dataset, synth_dataset, Dataset, SynthSpec, VideoRecord, MANIFEST};
use kinet::trainer::{evaluate, metrics_csv, train, EvalReport, Protocol};
use kinet::{Error, Result};

const OVERRIDE_HELP: &str = "Any config field can also be set with a dotted flag, e.g. \
`--optim.lr 0.01` or `--model.relation_kind=concat`. Sections: model, data, teacher, optim, eval. \
Precedence: defaults < --config file < dotted flags < named flags.";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Parser)]
#[command(
    name = "kinet",
    version,
    about = "Three-branch video action recognition: data, pseudo-labels, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural video dataset.
    Synthdata(SynthArgs),
    /// Precompute scene and human pseudo-labels for every video segment.
    #[command(after_help = OVERRIDE_HELP)]
    Pseudolabel(PseudoArgs),
    /// Train a model; writes metrics, a checkpoint and a summary.
    #[command(after_help = OVERRIDE_HELP)]
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints and writes top-1/top-5 as JSON.
    #[command(after_help = OVERRIDE_HELP)]
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences in 64-bit.
    Gradcheck(GradArgs),
    /// Export per-branch activation heatmaps for one video.
    #[command(after_help = OVERRIDE_HELP)]
    Actmap(ActmapArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives manifest.jsonl and videos/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    videos_per_class: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Frame height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Frame width in pixels.
    #[arg(long, default_value_t = 80)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PseudoArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory or its manifest.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// `synthetic` or `file:PATH` (a label manifest). Defaults to the config's teacher section.
    #[arg(long)]
    teacher: Option<String>,
    /// Output directory for masks/ and labels.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Synthetic teacher seed (overrides teacher.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory or its manifest.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Label cache directory or its labels.jsonl; needed when auxiliary losses are on.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training seed (overrides optim.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Skip the evaluation pass after training.
    #[arg(long)]
    skip_eval: bool,
    /// No per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    /// 25 segments × 10 views.
    Full250,
    /// One center crop per segment.
    Fast,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or its manifest.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Overrides eval.protocol.
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Report path; defaults to eval.json beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Cbi,
    Akg,
    Losses,
    Model,
    All,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, value_enum, default_value = "all")]
    target: TargetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ActmapArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of one video's frames (00000.png, 00001.png, ...).
    #[arg(long)]
    video: PathBuf,
    /// Output directory for {branch}_seg{i}.png.
    #[arg(long)]
    out: PathBuf,
}

type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` and `--section.key=value` out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|s| s.split_once('.').is_some_and(|(sec, _)| SECTIONS.contains(&sec)));
        let Some(body) = dotted else {
            rest.push(a);
            continue;
        };
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(body, "override flag needs a value"))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST)
    } else {
        data.to_path_buf()
    }
}

fn label_manifest_path(labels: &Path) -> PathBuf {
    if labels.is_dir() {
        labels.join(LABEL_MANIFEST)
    } else {
        labels.to_path_buf()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_if_changed(path, text.as_bytes())?;
    Ok(text)
}

fn synthdata(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_classes: a.classes,
        videos_per_class: a.videos_per_class,
        frames_per_video: a.frames,
        frame_hw: [a.height, a.width],
        seed: a.seed,
    };
    let rows = synth_dataset(&a.out, &spec)?;
    println!("wrote {} videos to {}", rows.len(), a.out.display());
    Ok(())
}

fn pseudolabel(a: PseudoArgs, overrides: &[(String, String)]) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.config.as_deref(), overrides)?;
    if let Some(t) = &a.teacher {
        match t.as_str() {
            "synthetic" => cfg.teacher.kind = TeacherKind::Synthetic,
            _ => match t.strip_prefix("file:") {
                Some(p) if !p.is_empty() => {
                    cfg.teacher.kind = TeacherKind::File;
                    cfg.teacher.path = Some(PathBuf::from(p));
                }
                _ => return Err(Error::config("teacher", "expected `synthetic` or `file:PATH`")),
            },
        }
    }
    if let Some(s) = a.seed {
        cfg.teacher.seed = s;
    }
    cfg.validate()?;
    let dataset = Dataset::open(&manifest_path(&a.data))?;
    let teacher: Box<dyn TeacherProvider> = match cfg.teacher.kind {
        TeacherKind::Synthetic => Box::new(synthetic_teacher(cfg.teacher.seed, cfg.model.k_scene)),
        TeacherKind::File => {
            let p = cfg.teacher.path.as_deref().expect("validated");
            Box::new(FileTeacher::open(&label_manifest_path(p), cfg.model.k_scene)?)
        }
    };
    let records = pseudo_label_dataset(&dataset, teacher.as_ref(), cfg.model.n_seg)?;
    let stats = write_label_cache(&a.out, &records)?;
    println!(
        "{} records, {} files written to {}",
        stats.records,
        stats.files_written,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    config_hash: String,
    epochs_done: usize,
    final_train_top1: f64,
    final_loss_total: f64,
    eval: Option<EvalReport>,
    seconds: f64,
}

fn train_cmd(a: TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let start = Instant::now();
    let mut cfg = RunConfig::load(a.config.config.as_deref(), overrides)?;
    if let Some(s) = a.seed {
        cfg.optim.seed = s;
    }
    cfg.validate()?;
    let dataset = Dataset::open(&manifest_path(&a.data))?;
    let labels_path = a.labels.clone().or_else(|| cfg.teacher.path.clone());
    let labels = labels_path
        .map(|p| FileTeacher::open(&label_manifest_path(&p), cfg.model.k_scene))
        .transpose()?;
    let opts = cfg.train_options();
    let (model, resume) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model.config() != &cfg.model {
                return Err(Error::config(
                    "resume",
                    "checkpoint model config differs from the run config",
                ));
            }
            let optim = ck
                .optim
                .ok_or_else(|| Error::Data(format!("{} holds no optimizer state", p.display())))?;
            (ck.model, Some((optim, ck.epoch)))
        }
        None => (build_model::<f32>(&cfg.model, cfg.optim.seed)?, None),
    };
    let quiet = a.quiet;
    let out = train(model, &dataset, labels.as_ref(), &opts, resume, |m| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  lr {:.2e}  loss {:.4}  top1 {:.3}",
                m.epoch, m.lr, m.loss_total, m.train_top1
            );
        }
    })?;
    write_if_changed(&a.out.join(METRICS_FILE), metrics_csv(&out.history).as_bytes())?;
    write_if_changed(&a.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let ck = Checkpoint {
        model: out.model,
        optim: Some(out.optim),
        epoch: out.epochs_done,
        seed: cfg.optim.seed,
    };
    ck.save(&a.out.join(CHECKPOINT_FILE))?;
    let eval = if a.skip_eval {
        None
    } else {
        Some(evaluate(&ck.model, &dataset, cfg.data.base_hw, &cfg.eval)?)
    };
    let last = out.history.last();
    let summary = TrainSummary {
        seed: cfg.optim.seed,
        config_hash: cfg.hash(),
        epochs_done: out.epochs_done,
        final_train_top1: last.map_or(f64::NAN, |m| m.train_top1),
        final_loss_total: last.map_or(f64::NAN, |m| m.loss_total),
        eval,
        seconds: start.elapsed().as_secs_f64(),
    };
    print!("{}", write_json(&a.out.join(SUMMARY_FILE), &summary)?);
    Ok(())
}

fn eval_cmd(a: EvalArgs, overrides: &[(String, String)]) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.config.as_deref(), overrides)?;
    if let Some(p) = a.protocol {
        cfg.eval.protocol = match p {
            ProtocolArg::Full250 => Protocol::Full250,
            ProtocolArg::Fast => Protocol::Fast,
        };
    }
    cfg.validate()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let dataset = Dataset::open(&manifest_path(&a.data))?;
    let report = evaluate(&ck.model, &dataset, cfg.data.base_hw, &cfg.eval)?;
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join(EVAL_FILE));
    print!("{}", write_json(&out, &report)?);
    Ok(())
}

fn gradcheck_cmd(a: GradArgs) -> Result<()> {
    let target = match a.target {
        TargetArg::Cbi => Target::Cbi,
        TargetArg::Akg => Target::Akg,
        TargetArg::Losses => Target::Losses,
        TargetArg::Model => Target::Model,
        TargetArg::All => Target::All,
    };
    let options = CheckOptions {
        seed: a.seed,
        ..CheckOptions::default()
    };
    let reports = checks::run(target, a.seed, &options)?;
    let mut failed = Vec::new();
    for r in &reports {
        let worst = r
            .worst
            .as_ref()
            .map(|c| {
                format!(
                    " worst=leaf{}[{}] analytic={:.6e} numeric={:.6e}",
                    c.leaf, c.index, c.analytic, c.numeric
                )
            })
            .unwrap_or_default();
        println!(
            "{} {} max_rel_error={:.3e} checked={}/{} kinks={} resolution_limited={}{}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.checked,
            r.total_coords,
            r.skipped_kinks,
            r.resolution_limited,
            worst
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

/// A video given as a bare frame directory.
fn video_from_dir(dir: &Path) -> Result<VideoRecord> {
    let mut frame_paths = Vec::new();
    while dir.join(frame_file(frame_paths.len())).is_file() {
        frame_paths.push(dir.join(frame_file(frame_paths.len())));
    }
    if frame_paths.is_empty() {
        return Err(Error::io(
            dir.join(frame_file(0)),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no frames in video directory"),
        ));
    }
    Ok(VideoRecord {
        video_id: dir
            .file_name()
            .map_or("video".into(), |n| n.to_string_lossy().into_owned()),
        frame_paths,
        action_label: 0,
        scene_factor: None,
    })
}

fn actmap_cmd(a: ActmapArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = RunConfig::load(a.config.config.as_deref(), overrides)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let video = video_from_dir(&a.video)?;
    let maps = activation_maps(&ck.model, &video, cfg.data.base_hw)?;
    for p in write_maps(&a.out, &maps)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(args: Vec<String>) -> Result<()> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let no_overrides = |cmd: &str| {
        if overrides.is_empty() {
            Ok(())
        } else {
            Err(Error::config(
                &overrides[0].0,
                format!("`{cmd}` takes no config overrides"),
            ))
        }
    };
    match cli.command {
        Command::Synthdata(a) => {
            no_overrides("synthdata")?;
            synthdata(a)
        }
        Command::Pseudolabel(a) => pseudolabel(a, &overrides),
        Command::Train(a) => train_cmd(a, &overrides),
        Command::Eval(a) => eval_cmd(a, &overrides),
        Command::Gradcheck(a) => {
            no_overrides("gradcheck")?;
            gradcheck_cmd(a)
        }
        Command::Actmap(a) => actmap_cmd(a, &overrides),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", cat.as_str());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn dotted_flags_are_split_out() {
        let (rest, o) = split_overrides(argv("kinet train --data d --optim.lr 0.1 --model.akg=false --out o")).unwrap();
        assert_eq!(rest, argv("kinet train --data d --out o"));
        assert_eq!(
            o,
            vec![
                ("optim.lr".to_string(), "0.1".to_string()),
                ("model.akg".to_string(), "false".to_string())
            ]
        );
    }

    #[test]
    fn unknown_sections_are_left_for_clap() {
        let (rest, o) = split_overrides(argv("kinet eval --foo.bar 1")).unwrap();
        assert!(o.is_empty());
        assert_eq!(rest.len(), 4);
    }

    #[test]
    fn dangling_override_is_a_config_error() {
        assert!(matches!(
            split_overrides(argv("kinet train --optim.lr")),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
