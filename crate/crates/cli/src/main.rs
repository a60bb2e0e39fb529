#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use eapcr::analysis::{self, ImageSpace};
use eapcr::autodiff::gradcheck;
use eapcr::datasets::{self, ImageDataset};
use eapcr::encoding::Target;
use eapcr::harness::{
    evaluate, load_mnist_train, run_experiment, write_seed_table, DataConfig, ExperimentConfig, PreparedData,
    RunOptions, RunRecord, RunStatus, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS,
};
use eapcr::model::{Checkpoint, Model, ModelConfig};
use eapcr::permutation::PermutationSpec;
use eapcr::{Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "eapcr", version, about = "Train and analyse EAPCR models")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Omit wall-clock fields so records compare byte for byte.
    #[arg(long, global = true)]
    reproducible: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write row/column scrambled copies of the MNIST IDX files.
    Synth {
        /// Directory holding the original IDX files.
        #[arg(long)]
        mnist: PathBuf,
        #[arg(long, value_enum, default_value_t = PermKind::Designed)]
        kind: PermKind,
    },
    /// Train one model per seed; records go under --out.
    Train {
        /// Run every listed seed and write a seed table.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Re-evaluate a finished run from its directory.
    Eval {
        /// Run directory holding record.json and checkpoint.json.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
    /// Finite-difference check of every operator and a tiny end-to-end model.
    Gradcheck,
    /// Distance, information-gain and correlation-recovery studies.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Permutation utilities.
    #[command(subcommand)]
    Perm(Perm),
}

#[derive(Subcommand)]
enum Analyze {
    /// Pixel correlation against a reference pixel, by distance (CSV).
    Distance {
        /// IDX image file; labels are read from the matching labels file.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Images sampled per class.
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Reference pixel as row,col.
        #[arg(long, value_parser = parse_pair, default_value = "5,5")]
        reference: (usize, usize),
    },
    /// Information-gain table.
    Infogain {
        /// Print the built-in worked examples.
        #[arg(long)]
        demo: bool,
    },
    /// Recall of the attention-derived correlation pattern (JSON).
    Recover {
        /// checkpoint.json, or a run directory.
        #[arg(long)]
        model: PathBuf,
        /// IDX image file of raw images; defaults to the run's MNIST test draw.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Layout whose pixel correlations serve as ground truth.
        #[arg(long, value_enum)]
        truth: Space,
        /// Layout the model was trained on.
        #[arg(long, value_enum, default_value_t = Space::Synth)]
        input: Space,
        /// Fraction of off-diagonal entries kept in each pattern.
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        /// Images used from --dataset.
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
}

#[derive(Subcommand)]
enum Perm {
    /// Print σ(i) for i = 0..n, one per line.
    Dump {
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value_t = PermKind::Designed)]
        kind: PermKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PermKind {
    Designed,
    Random,
    Identity,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Raw,
    Synth,
}

impl From<Space> for ImageSpace {
    fn from(s: Space) -> Self {
        match s {
            Space::Raw => ImageSpace::Raw,
            Space::Synth => ImageSpace::Synth,
        }
    }
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected ROW,COL")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Usage(_) => EXIT_USAGE,
                Error::Divergence { .. } => EXIT_DIVERGED,
                _ => EXIT_DATA,
            })
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Synth { mnist, kind } => synth(cli, mnist, *kind),
        Command::Train { seeds, quiet } => train(cli, seeds, *quiet),
        Command::Eval { run, split } => eval(run, *split),
        Command::Gradcheck => gradcheck_all(cli.seed.unwrap_or(0)),
        Command::Analyze(a) => analyze(cli, a),
        Command::Perm(Perm::Dump { n, kind }) => {
            let p = build_perm(*kind, *n, cli.seed.unwrap_or(0))?;
            let mut out = std::io::stdout().lock();
            for v in p.map() {
                writeln!(out, "{v}").map_err(|e| Error::io("stdout", e))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn build_perm(kind: PermKind, n: usize, seed: u64) -> Result<PermutationSpec> {
    match kind {
        PermKind::Designed => PermutationSpec::designed(n),
        PermKind::Random => PermutationSpec::random(n, seed),
        PermKind::Identity => PermutationSpec::identity(n),
    }
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Usage("--out is required".into()))
}

fn synth(cli: &Cli, mnist: &Path, kind: PermKind) -> Result<ExitCode> {
    let out = require_out(cli)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = build_perm(kind, datasets::MNIST_SIDE, cli.seed.unwrap_or(0))?;
    for prefix in ["train", "t10k"] {
        let (images, labels) = (
            format!("{prefix}-images-idx3-ubyte"),
            format!("{prefix}-labels-idx1-ubyte"),
        );
        let src = mnist.join(&images);
        if !src.exists() && prefix == "t10k" {
            continue;
        }
        let ds = datasets::load_mnist_idx(src, mnist.join(&labels))?;
        let s = datasets::synthesize_frp_free(&ds, &p)?;
        datasets::write_idx(&s, out.join(&images), out.join(&labels))?;
        eprintln!("{prefix}: {} images", s.len());
    }
    std::fs::write(out.join("permutation.json"), serde_json::to_string_pretty(&p)?).map_err(|e| Error::io(out, e))?;
    Ok(ExitCode::SUCCESS)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("--config is required".into()))?;
    ExperimentConfig::load(path)
}

fn train(cli: &Cli, seeds: &[u64], quiet: bool) -> Result<ExitCode> {
    let base = load_config(cli)?;
    let root = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&base.name));
    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![cli.seed.unwrap_or(base.seed)]
    } else {
        seeds.to_vec()
    };
    let multi = seeds.len() > 1;
    let mut records = Vec::new();
    let mut diverged = false;
    for seed in seeds {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        let dir = if multi {
            root.join(format!("seed-{seed}"))
        } else {
            root.clone()
        };
        let opts = RunOptions {
            reproducible: cli.reproducible,
            out_dir: Some(dir.clone()),
        };
        let mut progress = |e: &eapcr::harness::EpochRecord| {
            if !quiet {
                eprintln!(
                    "[{} seed {seed}] epoch {:>3}  loss {:.4}  test {:.4}",
                    cfg.name, e.epoch, e.train_loss, e.test_metric
                );
            }
        };
        let run = run_experiment(&cfg, &opts, &mut progress)?;
        if let RunStatus::Diverged { epoch, batch, loss } = run.record.status {
            eprintln!("seed {seed}: diverged at epoch {epoch}, batch {batch} (loss {loss})");
            diverged = true;
        }
        eprintln!("wrote {}", dir.join("record.json").display());
        if !multi {
            println!("{}", serde_json::to_string_pretty(&run.record)?);
        }
        records.push(run.record);
    }
    if multi {
        let table = root.join("seeds.csv");
        write_seed_table(&table, &records)?;
        print!("{}", std::fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?);
    }
    Ok(if diverged {
        ExitCode::from(EXIT_DIVERGED)
    } else {
        ExitCode::SUCCESS
    })
}

fn load_run(dir: &Path) -> Result<(RunRecord, Model<f32>)> {
    let record = RunRecord::load(dir.join("record.json"))?;
    let ck_name = record
        .artifacts
        .get("checkpoint")
        .map_or("checkpoint.json", String::as_str);
    let ck = Checkpoint::load(dir.join(ck_name))?;
    let model = Model::from_checkpoint(&ck, Some(&record.dictionary_hash))?;
    Ok((record, model))
}

fn eval(dir: &Path, split: EvalSplit) -> Result<ExitCode> {
    let (record, model) = load_run(dir)?;
    let data = PreparedData::load(&record.config)?;
    let samples = if split == EvalSplit::Test {
        &data.test
    } else {
        &data.train
    };
    let metrics = evaluate(&model, samples)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_all(seed: u64) -> Result<ExitCode> {
    let mut rows = gradcheck::operator_suite(seed)?
        .into_iter()
        .map(|r| (r, 1e-4))
        .collect::<Vec<_>>();
    let m = Model::<f64>::new(ModelConfig::tiny_eapcr(), seed)?;
    let x: Vec<usize> = (0..9).map(|i| (i * 5 + seed as usize) % 4).collect();
    rows.push((m.gradient_check(&x, Target::Class(1), seed, None)?, 1e-3));
    let mut all = true;
    println!(
        "{:<28} {:>8} {:>12} {:>10}  result",
        "check", "entries", "max rel err", "tolerance"
    );
    for (r, tol) in &rows {
        let ok = r.passes(*tol);
        all &= ok;
        println!(
            "{:<28} {:>8} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.checked,
            r.max_rel_error,
            tol,
            if ok { "pass" } else { "FAIL" }
        );
    }
    Ok(if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_DATA)
    })
}

fn labels_for(images: &Path, labels: Option<&PathBuf>) -> Result<PathBuf> {
    if let Some(l) = labels {
        return Ok(l.clone());
    }
    let name = images.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if !name.contains("images-idx3") {
        return Err(Error::Usage(format!(
            "cannot infer a labels file for {}; pass --labels",
            images.display()
        )));
    }
    Ok(images.with_file_name(name.replace("images-idx3", "labels-idx1")))
}

fn analyze(cli: &Cli, a: &Analyze) -> Result<ExitCode> {
    match a {
        Analyze::Distance {
            dataset,
            labels,
            per_class,
            reference,
        } => {
            let ds = datasets::load_mnist_idx(dataset, labels_for(dataset, labels.as_ref())?)?;
            let table = analysis::distance_correlation_study(&ds, *per_class, *reference, cli.seed.unwrap_or(0))?;
            if table.reference_constant {
                eprintln!("warning: reference pixel {reference:?} is constant over the sample");
            }
            match &cli.out {
                Some(out) => {
                    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                    table.write_csv(out.join("distance.csv"))?;
                }
                None => print!("{}", table.to_csv()),
            }
        }
        Analyze::Infogain { demo } => {
            if !demo {
                return Err(Error::Usage("only --demo is available".into()));
            }
            print!("{}", analysis::format_gain_table(&analysis::infogain_demo()?));
        }
        Analyze::Recover {
            model,
            dataset,
            labels,
            truth,
            input,
            fraction,
            count,
        } => {
            let (m, raw) = recover_inputs(model, dataset.as_ref(), labels.as_ref(), *count)?;
            let perm = PermutationSpec::designed(datasets::MNIST_SIDE)?;
            let report = analysis::recovery_study(&m, &raw, &perm, (*input).into(), &[(*truth).into()], *fraction)?;
            println!("{}", serde_json::to_string_pretty(&report[0])?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Model plus raw images: the given IDX file, or the run's own test draw.
fn recover_inputs(
    model: &Path,
    dataset: Option<&PathBuf>,
    labels: Option<&PathBuf>,
    count: usize,
) -> Result<(Model<f32>, ImageDataset)> {
    let (m, record) = if model.is_dir() {
        let (record, m) = load_run(model)?;
        (m, Some(record))
    } else {
        (Model::from_checkpoint(&Checkpoint::load(model)?, None)?, None)
    };
    let raw = match (dataset, record) {
        (Some(d), _) => {
            let ds = datasets::load_mnist_idx(d, labels_for(d, labels)?)?;
            let idx: Vec<usize> = (0..count.min(ds.len())).collect();
            ds.subset(&idx, datasets::SplitTag::Test)
        }
        (None, Some(r)) => match &r.config.data {
            DataConfig::Mnist {
                dir, n_train, n_test, ..
            } => {
                let full = load_mnist_train(dir)?;
                datasets::draw_subsets(&full, *n_train, *n_test, r.config.data_seed())?.1
            }
            DataConfig::Tabular { .. } => return Err(Error::Usage("recover works on image runs only".into())),
        },
        (None, None) => {
            return Err(Error::Usage(format!(
                "--dataset is required with a bare checkpoint (e.g. {MNIST_TRAIN_IMAGES} with {MNIST_TRAIN_LABELS})"
            )))
        }
    };
    Ok((m, raw))
}
