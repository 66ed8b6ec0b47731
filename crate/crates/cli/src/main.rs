use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rejuv_core::analysis::{trajectory_csv, trajectory_from_files, trajectory_svg};
use rejuv_core::checkpoint::Checkpoint;
use rejuv_core::config::RunConfig;
use rejuv_core::data::{ParallelCorpus, Split, TaskKind, TaskSpec, Vocab};
use rejuv_core::eval::{evaluate, sign_test, RESULTS_HEADER};
use rejuv_core::experiment::{sweep_ratio, SWEEP_HEADER};
use rejuv_core::model::Transformer;
use rejuv_core::train::{run_phase, run_pipeline, CsvSink, PhaseKind, PhasePlan, TrainState};
use rejuv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rejuv", version, about = "Prune, retrain and rejuvenate small translation transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus (train/dev/test TSV files).
    GenData {
        #[arg(long, default_value = "mapped_reverse")]
        task: String,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        /// Number of training pairs.
        #[arg(long, default_value_t = 8000)]
        pairs: usize,
        #[arg(long, default_value_t = 500)]
        dev_pairs: usize,
        #[arg(long, default_value_t = 500)]
        test_pairs: usize,
        #[arg(long, default_value_t = 4)]
        len_min: usize,
        #[arg(long, default_value_t = 12)]
        len_max: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a single training phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        phase: String,
        /// Checkpoint to continue from (required for every phase but base).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Base checkpoint for external rejuvenation; defaults to base.ckpt next to --from.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Directory holding train.tsv; by default the corpus is generated from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Base, then prune/rejuvenate rounds, plus the continued-training control.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// BLEU and perplexity of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with train/dev/test TSV files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Results CSV to append to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sentence BLEU comparison with a sign test.
    Compare {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Direct-prune and PruTrain dev BLEU for a list of pruning ratios.
    SweepRatio {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        ratios: Vec<f64>,
        /// Trained Base checkpoint; trained from the config when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encoder-representation trajectory of a directory of checkpoints.
    Analyze {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Output directory for trajectory.csv and trajectory.svg.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { task, vocab, pairs, dev_pairs, test_pairs, len_min, len_max, seed, out } => {
            let kind: TaskKind = task.parse()?;
            let spec = TaskSpec::new(kind, Vocab::new(vocab)?, (len_min, len_max), seed)?;
            fs::create_dir_all(&out)?;
            for (split, n) in [(Split::Train, pairs), (Split::Dev, dev_pairs), (Split::Test, test_pairs)] {
                let corpus = spec.generate(split, n)?;
                corpus.write_tsv(&out.join(format!("{split}.tsv")))?;
                println!("{split}: {} pairs", corpus.len());
            }
            Ok(())
        }
        Command::Train { config, phase, from, base, data, out_dir } => {
            train(&config, &phase, from.as_deref(), base.as_deref(), data.as_deref(), &out_dir)
        }
        Command::Pipeline { config, out_dir } => pipeline(&config, out_dir),
        Command::Eval { ckpt, data, split, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = read_split(&data, &split)?;
            let report = evaluate(&ck.model()?, &corpus)?;
            print!("run_id={}\nphase={}\n{}", ck.id, ck.phase, report.to_kv());
            if let Some(out) = out {
                append_row(&out, RESULTS_HEADER, &report.csv_row(&ck.id, ck.phase.as_str()))?;
            }
            Ok(())
        }
        Command::Compare { ckpt_a, ckpt_b, data, split } => {
            let corpus = read_split(&data, &split)?;
            let a = evaluate(&Checkpoint::load(&ckpt_a)?.model()?, &corpus)?;
            let b = evaluate(&Checkpoint::load(&ckpt_b)?.model()?, &corpus)?;
            let (sa, sb) = (&a.per_sentence_bleu, &b.per_sentence_bleu);
            let wins = sa.iter().zip(sb).filter(|(x, y)| x > y).count();
            let losses = sa.iter().zip(sb).filter(|(x, y)| x < y).count();
            let p = sign_test(sa, sb)?;
            println!(
                "bleu_a={}\nbleu_b={}\nwins_a={wins}\nwins_b={losses}\nties={}\np_value={p}",
                a.bleu,
                b.bleu,
                sa.len() - wins - losses
            );
            Ok(())
        }
        Command::SweepRatio { config, ratios, base, out } => {
            let cfg = RunConfig::load(&config)?;
            let train = cfg.task.corpus(Split::Train)?;
            let dev = cfg.task.corpus(Split::Dev)?;
            let base = match base {
                Some(p) => Checkpoint::load(&p)?,
                None => {
                    let p = &cfg.pipeline;
                    let model = Transformer::build(p.model.clone(), p.model_seed())?;
                    let state =
                        run_phase(TrainState::fresh(model), &p.base_plan(), &p.train, &train, None, &mut rejuv_core::train::NullSink)?;
                    Checkpoint::from_state("base", PhaseKind::Base, &state, p.seed, None)
                }
            };
            let rows = sweep_ratio(&base, &cfg.pipeline, &ratios, &train, &dev)?;
            let mut text = format!("{SWEEP_HEADER}\n");
            for r in &rows {
                text.push_str(&r.csv_row());
                text.push('\n');
            }
            fs::write(&out, &text)?;
            print!("{text}");
            Ok(())
        }
        Command::Analyze { ckpt_dir, data, split, out } => {
            let dev = read_split(&data, &split)?;
            let mut paths: Vec<PathBuf> = fs::read_dir(&ckpt_dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            paths.retain(|p| p.extension().is_some_and(|e| e == "ckpt"));
            paths.sort();
            write_trajectory(&paths, &dev, &out)
        }
    }
}

fn read_split(dir: &Path, split: &str) -> Result<ParallelCorpus> {
    let split: Split = split.parse()?;
    let path = dir.join(format!("{split}.tsv"));
    if !path.exists() {
        return Err(Error::Data(format!("{} not found", path.display())));
    }
    ParallelCorpus::read_tsv(&path, split)
}

fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

fn write_trajectory(paths: &[PathBuf], dev: &ParallelCorpus, out: &Path) -> Result<()> {
    let points = trajectory_from_files(paths, dev)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("trajectory.csv"), trajectory_csv(&points))?;
    fs::write(out.join("trajectory.svg"), trajectory_svg(&points))?;
    println!("{} trajectory points written to {}", points.len(), out.display());
    Ok(())
}

/// Name for the checkpoint a phase produces, continuing the pipeline's
/// base / pruN / rejN / con scheme.
fn next_id(phase: PhaseKind, parent: Option<&str>) -> String {
    let round = |p: &str| p.trim_start_matches(|c: char| c.is_ascii_alphabetic()).parse::<u32>().unwrap_or(0);
    match (phase, parent) {
        (PhaseKind::Base, _) => "base".into(),
        (PhaseKind::ConTrain, _) => "con".into(),
        (PhaseKind::PruTrain, Some(p)) if p.starts_with("rej") => format!("pru{}", round(p) + 1),
        (PhaseKind::PruTrain, _) => "pru1".into(),
        (PhaseKind::RejTrain, Some(p)) => format!("rej{}", round(p).max(1)),
        (PhaseKind::RejTrain, None) => "rej1".into(),
    }
}

fn train(config: &Path, phase: &str, from: Option<&Path>, base: Option<&Path>, data: Option<&Path>, out_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let p = &cfg.pipeline;
    let kind: PhaseKind = phase.parse()?;
    let corpus = match data {
        Some(dir) => read_split(dir, "train")?,
        None => cfg.task.corpus(Split::Train)?,
    };
    let parent = from.map(Checkpoint::load).transpose()?;
    let (start, parent_id) = match (kind, parent) {
        (PhaseKind::Base, Some(_)) => return Err(Error::Usage("base phase starts from scratch; drop --from".into())),
        (PhaseKind::Base, None) => (TrainState::fresh(Transformer::build(p.model.clone(), p.model_seed())?), None),
        (_, None) => return Err(Error::Usage(format!("{kind} phase needs --from <checkpoint>"))),
        (_, Some(ck)) => {
            let id = ck.id.clone();
            (ck.into_state()?, Some(id))
        }
    };
    let id = next_id(kind, parent_id.as_deref());
    let round = id.trim_start_matches(|c: char| c.is_ascii_alphabetic()).parse().unwrap_or(1);
    let plan: PhasePlan = match kind {
        PhaseKind::Base => p.base_plan(),
        PhaseKind::PruTrain => p.pru_plan(round),
        PhaseKind::RejTrain => p.rej_plan(round),
        PhaseKind::ConTrain => p.con_plan(),
    };
    let base_store = match (kind, p.rejuv_init) {
        (PhaseKind::RejTrain, rejuv_core::train::RejuvInit::External) => {
            let path = base
                .map(Path::to_path_buf)
                .or_else(|| from.and_then(Path::parent).map(|d| d.join("base.ckpt")))
                .filter(|p| p.exists())
                .ok_or_else(|| Error::Config("external rejuvenation needs a Base checkpoint (--base)".into()))?;
            Some(Checkpoint::load(&path)?.params)
        }
        _ => None,
    };
    fs::create_dir_all(out_dir)?;
    let mut sink = CsvSink::create(&out_dir.join(format!("metrics_{id}.csv")))?;
    let state = run_phase(start, &plan, &p.train, &corpus, base_store.as_ref(), &mut sink)?;
    let path = out_dir.join(format!("{id}.ckpt"));
    Checkpoint::from_state(&id, kind, &state, p.seed, parent_id.as_deref()).save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn pipeline(config: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let out = out_dir.or(cfg.out_dir.clone()).ok_or_else(|| Error::Usage("pipeline needs --out-dir or output.dir in the config".into()))?;
    let train = cfg.task.corpus(Split::Train)?;
    let dev = cfg.task.corpus(Split::Dev)?;
    let test = cfg.task.corpus(Split::Test)?;
    let run = run_pipeline(&cfg.pipeline, &train, &out)?;
    let results = out.join("results.csv");
    if results.exists() {
        fs::remove_file(&results)?;
    }
    for c in &run.checkpoints {
        let report = evaluate(&Checkpoint::load(&c.path)?.model()?, &test)?;
        append_row(&results, RESULTS_HEADER, &report.csv_row(&c.id, c.phase.as_str()))?;
        println!("{:>5}  step {:>6}  test bleu {:.4}  perplexity {:.4}", c.id, c.step, report.bleu, report.perplexity);
    }
    let mut paths: Vec<PathBuf> = run.snapshots.iter().map(|s| s.path.clone()).collect();
    if paths.len() < 3 {
        paths = run.checkpoints.iter().map(|c| c.path.clone()).collect();
    }
    if paths.len() >= 3 {
        write_trajectory(&paths, &dev, &out)?;
    }
    Ok(())
}
