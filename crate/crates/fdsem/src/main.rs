//! Command-line surface: train, infer, eval, gradcheck, oracle-check.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 verification
//! failure. Structured output goes to stdout as JSON; logs go to stderr.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use serde::Serialize;

use fdsem::checkpoint::Checkpoint;
use fdsem::config::RunConfig;
use fdsem::error::Error;
use fdsem::eval::{infer_truth, score_ranking, score_similarity, ModelStack, SimilarityMode};
use fdsem::graph::{
    load_ranking_benchmark, load_similarity_benchmark, parse_graph_record, parse_sembank,
    Vocabulary,
};
use fdsem::train::{train_epoch, EpochMetrics, Model, Optimisers};
use fdsem::verify::{all_passed, gradcheck, oracle_check, CheckReport};

#[derive(Parser)]
#[command(name = "fdsem", version, about = "Functional distributional semantics engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a sembank, writing a checkpoint after each epoch.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Probability that a predicate is true of one node of a graph.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// File holding one graph record in sembank JSON format.
        #[arg(long)]
        graph: PathBuf,
        /// Target node index.
        #[arg(long)]
        node: usize,
        /// Predicate name to apply.
        #[arg(long)]
        predicate: String,
    },
    /// Score a benchmark file against a trained model.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
        /// Similarity scoring direction.
        #[arg(long, value_enum, default_value_t = Mode::One)]
        mode: Mode,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Agreement of every approximation with the exact brute-force reference.
    OracleCheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Ranking,
    Similarity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    One,
    Both,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version leave through the error path with status 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> fdsem::Result<ExitCode> {
    match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Infer { ckpt, graph, node, predicate } => {
            cmd_infer(&ckpt, &graph, node, &predicate)
        }
        Command::Eval { ckpt, task, data, mode } => cmd_eval(&ckpt, task, &data, mode),
        Command::Gradcheck { seed, trials } => {
            let reports = gradcheck(seed, trials, None);
            print_reports("gradcheck", seed, &reports);
            Ok(verification_exit(&reports))
        }
        Command::OracleCheck { seed } => {
            let reports = oracle_check(seed);
            print_reports("oracle-check", seed, &reports);
            Ok(verification_exit(&reports))
        }
    }
}

#[derive(Serialize)]
struct TrainRecord {
    #[serde(flatten)]
    metrics: EpochMetrics,
    wall_time_s: f64,
}

fn cmd_train(config_path: &Path, resume: Option<&Path>) -> fdsem::Result<ExitCode> {
    let run_cfg = RunConfig::load(config_path)?;
    let cfg = run_cfg.train_config();
    let sembank = File::open(&run_cfg.sembank)
        .map_err(|e| Error::Config(format!("cannot open sembank {}: {e}", run_cfg.sembank)))?;
    let (corpus, vocab) = parse_sembank(BufReader::new(sembank))?;
    eprintln!(
        "loaded {} graphs, {} predicates, {} labels",
        corpus.len(),
        vocab.num_predicates(),
        vocab.num_labels()
    );

    let (mut model, mut opt, start_epoch) = match resume {
        Some(path) => {
            let (ck_vocab, model, opt, _, epoch) = Checkpoint::load(path)?.into_parts()?;
            if ck_vocab != vocab {
                return Err(Error::Checkpoint(
                    "checkpoint vocabulary does not match the sembank".into(),
                ));
            }
            (model, opt, epoch)
        }
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = Model::init(&vocab, &run_cfg.model_dims(), &mut rng)?;
            let opt = Optimisers::new(&model);
            (model, opt, 0)
        }
    };

    let ckpt_path = PathBuf::from(&run_cfg.checkpoint);
    if start_epoch >= cfg.epochs {
        // nothing to run; still write the checkpoint so a zero-epoch run
        // produces an initialised model file
        let ck = Checkpoint::from_parts(&vocab, &model, &opt, &cfg, start_epoch);
        ck.save(&ckpt_path)?;
        eprintln!("no epochs to run (start {start_epoch}, target {})", cfg.epochs);
        return Ok(ExitCode::SUCCESS);
    }
    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let metrics = train_epoch(&corpus, &vocab, &mut model, &mut opt, &cfg, epoch)?;
        let record = TrainRecord { metrics, wall_time_s: started.elapsed().as_secs_f64() };
        println!("{}", serde_json::to_string(&record).expect("metrics serialise"));
        let ck = Checkpoint::from_parts(&vocab, &model, &opt, &cfg, epoch + 1);
        ck.save(&ckpt_path)?;
    }
    eprintln!("checkpoint written to {}", ckpt_path.display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> fdsem::Result<(Vocabulary, Model)> {
    let (vocab, model, _, _, _) = Checkpoint::load(path)?.into_parts()?;
    Ok((vocab, model))
}

fn cmd_infer(
    ckpt: &Path,
    graph_path: &Path,
    node: usize,
    predicate: &str,
) -> fdsem::Result<ExitCode> {
    let (vocab, model) = load_model(ckpt)?;
    let text = std::fs::read_to_string(graph_path)?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Parse { line: 0, message: "graph file is empty".into() })?;
    let graph = parse_graph_record(line, &vocab)?;
    let pred = vocab
        .predicate_id(predicate)
        .ok_or_else(|| Error::Vocab(format!("unknown predicate {predicate:?}")))?;
    let stack = ModelStack {
        vocab: &vocab,
        world: &model.world,
        lexical: &model.lexical,
        encoder: &model.encoder,
    };
    let p = infer_truth(&graph, node, pred, &stack)?;
    println!("{p}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(ckpt: &Path, task: Task, data: &Path, mode: Mode) -> fdsem::Result<ExitCode> {
    let (vocab, model) = load_model(ckpt)?;
    let stack = ModelStack {
        vocab: &vocab,
        world: &model.world,
        lexical: &model.lexical,
        encoder: &model.encoder,
    };
    let reader = BufReader::new(File::open(data)?);
    match task {
        Task::Ranking => {
            let rows = load_ranking_benchmark(reader)?;
            let report = score_ranking(&rows, &stack, None)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serialises"));
        }
        Task::Similarity => {
            let rows = load_similarity_benchmark(reader)?;
            let mode = match mode {
                Mode::One => SimilarityMode::OneDirection,
                Mode::Both => SimilarityMode::BothDirections,
            };
            let report = score_similarity(&rows, mode, &stack, None)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serialises"));
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct VerificationReport<'a> {
    suite: &'a str,
    seed: u64,
    passed: bool,
    checks: &'a [CheckReport],
}

fn print_reports(suite: &str, seed: u64, reports: &[CheckReport]) {
    for r in reports {
        eprintln!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let summary = VerificationReport { suite, seed, passed: all_passed(reports), checks: reports };
    println!("{}", serde_json::to_string_pretty(&summary).expect("serialises"));
}

fn verification_exit(reports: &[CheckReport]) -> ExitCode {
    if all_passed(reports) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    }
}
