//! `chunklm` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numeric failure
//! (non-finite values, divergence, gradient check above threshold),
//! 3 guard refusal.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chunklm::bench::{run_scaling, to_csv, ScalingConfig};
use chunklm::checkpoint;
use chunklm::data::{self, TokenSeq};
use chunklm::model::{sequence_grad_check, Sampling};
use chunklm::trainer::Trainer;
use chunklm::{Error, Model, ModelConfig, TrainConfig, CONFIG_KEYS};

const ABLATIONS: [&str; 3] = ["no_ssm", "no_retrieval", "no_rnn"];

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Guard { .. } => 3,
            ref e if e.is_numeric() => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn override_id(key: &str) -> String {
    format!("set.{key}")
}

fn with_common_args(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .value_parser(value_parser!(PathBuf))
                .help("Flat key-value config file"),
        )
        .arg(Arg::new("seed").long("seed").value_name("N").value_parser(value_parser!(u64)))
        .arg(
            Arg::new("chunk-size")
                .long("chunk-size")
                .value_name("N")
                .value_parser(value_parser!(usize)),
        )
        .arg(
            Arg::new("ablate")
                .long("ablate")
                .value_name("FLAG")
                .action(ArgAction::Append)
                .value_parser(ABLATIONS),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("PATH")
                .value_parser(value_parser!(PathBuf)),
        );
    for &key in CONFIG_KEYS {
        if key == "seed" || key == "ablate" {
            continue;
        }
        cmd = cmd.arg(
            Arg::new(override_id(key))
                .long(key)
                .value_name("VALUE")
                .help(format!("Override config key `{key}`"))
                .hide_short_help(true),
        );
    }
    cmd
}

fn cli() -> Command {
    let path_arg = |name: &'static str, help: &'static str| {
        Arg::new(name)
            .long(name)
            .value_name("PATH")
            .value_parser(value_parser!(PathBuf))
            .help(help)
    };
    Command::new("chunklm")
        .about("Chunked attention-free byte-level language model")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_common_args(
            Command::new("train")
                .about("Train a model; writes checkpoint and metrics.csv into --out")
                .arg(path_arg("corpus", "Training corpus (raw bytes, or a make-synth file)").required(true))
                .arg(path_arg("eval-corpus", "Held-out corpus for periodic evaluation"))
                .arg(path_arg("resume", "Continue from a training checkpoint")),
        ))
        .subcommand(with_common_args(
            Command::new("eval")
                .about("Report loss in nats/byte and bits/byte")
                .arg(path_arg("checkpoint", "Model checkpoint manifest").required(true))
                .arg(path_arg("corpus", "Corpus to score").required(true)),
        ))
        .subcommand(with_common_args(
            Command::new("generate")
                .about("Continue a prompt and print the bytes")
                .arg(path_arg("checkpoint", "Model checkpoint manifest").required(true))
                .arg(Arg::new("prompt").long("prompt").value_name("TEXT").required(true))
                .arg(
                    Arg::new("max-new")
                        .long("max-new")
                        .value_name("N")
                        .default_value("64")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("temperature")
                        .long("temperature")
                        .value_name("T")
                        .default_value("0")
                        .value_parser(value_parser!(f64))
                        .help("0 selects argmax decoding"),
                ),
        ))
        .subcommand(with_common_args(
            Command::new("gradcheck")
                .about("Finite-difference check of the end-to-end gradient (tiny config by default)")
                .arg(
                    Arg::new("probes")
                        .long("probes")
                        .value_name("N")
                        .default_value("200")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("threshold")
                        .long("threshold")
                        .value_name("X")
                        .default_value("1e-5")
                        .value_parser(value_parser!(f64)),
                )
                .arg(
                    Arg::new("length")
                        .long("length")
                        .value_name("N")
                        .default_value("24")
                        .value_parser(value_parser!(usize)),
                ),
        ))
        .subcommand(with_common_args(
            Command::new("make-synth")
                .about("Write the long-range recall corpus")
                .arg(
                    Arg::new("key-len")
                        .long("key-len")
                        .value_name("N")
                        .default_value("8")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("gap")
                        .long("gap")
                        .value_name("N")
                        .default_value("1024")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("samples")
                        .long("samples")
                        .value_name("N")
                        .default_value("2000")
                        .value_parser(value_parser!(usize)),
                ),
        ))
        .subcommand(with_common_args(
            Command::new("bench-scaling")
                .about("Time untrained forward passes over growing lengths and fit the exponent")
                .arg(
                    Arg::new("n-list")
                        .long("n-list")
                        .value_name("N,N,..")
                        .default_value("8192,16384,32768,65536"),
                )
                .arg(
                    Arg::new("attn-n-list")
                        .long("attn-n-list")
                        .value_name("N,N,..")
                        .default_value("512,1024,2048,4096"),
                )
                .arg(
                    Arg::new("reps")
                        .long("reps")
                        .value_name("N")
                        .default_value("5")
                        .value_parser(value_parser!(usize)),
                ),
        ))
}

/// Base config, then the config file, then per-key flags, then the named flags.
fn resolve_config(m: &ArgMatches, base: ModelConfig) -> CliResult<TrainConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig {
            model: base,
            ..TrainConfig::default()
        },
    };
    for &key in CONFIG_KEYS {
        if let Ok(Some(v)) = m.try_get_one::<String>(&override_id(key)) {
            cfg.set(key, v)?;
        }
    }
    if let Some(&c) = m.get_one::<usize>("chunk-size") {
        cfg.model.chunk_size = c;
    }
    if let Some(&s) = m.get_one::<u64>("seed") {
        cfg.seed = s;
    }
    if let Some(flags) = m.get_many::<String>("ablate") {
        for f in flags {
            cfg.model.ablations.set(f)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_lengths(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| usage(format!("bad length `{s}`: {e}")))
        })
        .collect()
}

/// A make-synth file (detected by its manifest) yields one sequence per
/// sample; any other file is split into `streams` contiguous sequences.
fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{}: no such file", path.display())))
    }
}

fn load_corpus(path: &Path, streams: usize) -> CliResult<Vec<TokenSeq>> {
    require_file(path)?;
    if data::manifest_path(path).exists() {
        return Ok(data::import_recall_corpus(path)?.into_iter().map(|s| s.seq).collect());
    }
    let seq = data::load_corpus_file(path)?;
    if seq.len() < 2 {
        return Err(usage(format!("{}: corpus needs at least 2 bytes", path.display())));
    }
    let parts = streams.clamp(1, seq.len() / 2);
    let per = seq.len() / parts;
    Ok((0..parts)
        .map(|i| {
            let end = if i + 1 == parts { seq.len() } else { (i + 1) * per };
            TokenSeq::new(seq.tokens[i * per..end].to_vec(), format!("{}:{i}", path.display()))
        })
        .collect())
}

fn cmd_train(m: &ArgMatches) -> CliResult {
    let out = m
        .get_one::<PathBuf>("out")
        .ok_or_else(|| usage("train needs --out DIR"))?;
    let mut trainer = match m.get_one::<PathBuf>("resume") {
        Some(path) => {
            require_file(path)?;
            Trainer::load(path)?
        }
        None => Trainer::new(resolve_config(m, ModelConfig::desk())?)?,
    };
    let corpus = load_corpus(m.get_one::<PathBuf>("corpus").unwrap(), trainer.cfg.batch_size)?;
    let eval = match m.get_one::<PathBuf>("eval-corpus") {
        Some(p) => Some(load_corpus(p, trainer.cfg.batch_size)?),
        None => None,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), trainer.cfg.render())?;
    let reports = trainer.fit(&corpus, eval.as_deref(), Some(out))?;
    match reports.last() {
        Some(r) => println!("step {} train_loss {:.4} nats/byte", r.step, r.loss),
        None => println!("step {} (no training steps run)", trainer.step),
    }
    println!("checkpoint {}", chunklm::trainer::checkpoint_path(out).display());
    Ok(())
}

fn load_model(m: &ArgMatches) -> CliResult<Model> {
    let path = m.get_one::<PathBuf>("checkpoint").unwrap();
    require_file(path)?;
    let mut model = checkpoint::load_model(path)?;
    if let Some(flags) = m.get_many::<String>("ablate") {
        for f in flags {
            model.cfg.ablations.set(f)?;
        }
    }
    Ok(model)
}

fn cmd_eval(m: &ArgMatches) -> CliResult {
    let model = load_model(m)?;
    let corpus = load_corpus(m.get_one::<PathBuf>("corpus").unwrap(), 1)?;
    let loss = model.evaluate(&corpus, 8)?;
    println!("loss {loss:.4} nats/byte");
    println!("{:.4} bits/byte", loss / std::f64::consts::LN_2);
    Ok(())
}

fn cmd_generate(m: &ArgMatches) -> CliResult {
    let model = load_model(m)?;
    let prompt = m.get_one::<String>("prompt").unwrap().as_bytes();
    let max_new = *m.get_one::<usize>("max-new").unwrap();
    let t = *m.get_one::<f64>("temperature").unwrap();
    let sampling = if t == 0.0 { Sampling::Argmax } else { Sampling::Temperature(t) };
    let seed = m.get_one::<u64>("seed").copied().unwrap_or(0);
    let out = model.generate(prompt, max_new, sampling, seed)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&out)?;
    stdout.write_all(b"\n")?;
    Ok(())
}

fn cmd_gradcheck(m: &ArgMatches) -> CliResult {
    let cfg = resolve_config(m, ModelConfig::tiny())?;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let n = *m.get_one::<usize>("length").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seq = TokenSeq::new((0..n).map(|_| rand::Rng::gen(&mut rng)).collect(), "gradcheck");
    let threshold = *m.get_one::<f64>("threshold").unwrap();
    let check = sequence_grad_check(&model, &seq, *m.get_one::<usize>("probes").unwrap(), 1e-5, cfg.seed)?;
    println!(
        "max relative error {:.3e} over {} probes (threshold {threshold:e})",
        check.report.max_rel_error, check.report.probes
    );
    if check.report.max_rel_error > threshold {
        return Err(Failure {
            code: 2,
            message: "gradient check above threshold".into(),
        });
    }
    Ok(())
}

fn cmd_make_synth(m: &ArgMatches) -> CliResult {
    let out = m
        .get_one::<PathBuf>("out")
        .ok_or_else(|| usage("make-synth needs --out PATH"))?;
    let seed = m.get_one::<u64>("seed").copied().unwrap_or(0);
    let key_len = *m.get_one::<usize>("key-len").unwrap();
    let gap = *m.get_one::<usize>("gap").unwrap();
    let samples = data::make_recall_corpus(seed, key_len, gap, *m.get_one::<usize>("samples").unwrap())?;
    data::export_recall_corpus(out, &samples, seed, key_len, gap)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_bench_scaling(m: &ArgMatches) -> CliResult {
    let cfg = resolve_config(m, ModelConfig::desk())?;
    let scaling = ScalingConfig {
        model: cfg.model,
        chunked_lengths: parse_lengths(m.get_one::<String>("n-list").unwrap())?,
        attention_lengths: parse_lengths(m.get_one::<String>("attn-n-list").unwrap())?,
        reps: *m.get_one::<usize>("reps").unwrap(),
        seed: cfg.seed,
    };
    let report = run_scaling(&scaling)?;
    let csv = to_csv(&report.records);
    match m.get_one::<PathBuf>("out") {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    for f in &report.fits {
        eprintln!("fit {} alpha {:.4} r2 {:.4}", f.tag.name(), f.alpha, f.r2);
    }
    eprintln!("chunked peak floats constant: {}", report.chunked_peak_constant);
    if !report.chunked_peak_constant {
        return Err(Failure {
            code: 2,
            message: "chunked peak activation count changed with sequence length".into(),
        });
    }
    Ok(())
}

fn run(m: &ArgMatches) -> CliResult {
    match m.subcommand() {
        Some(("train", sub)) => cmd_train(sub),
        Some(("eval", sub)) => cmd_eval(sub),
        Some(("generate", sub)) => cmd_generate(sub),
        Some(("gradcheck", sub)) => cmd_gradcheck(sub),
        Some(("make-synth", sub)) => cmd_make_synth(sub),
        Some(("bench-scaling", sub)) => cmd_bench_scaling(sub),
        _ => Err(usage("unknown subcommand")),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
