//! Command-line driver for the rwkvx engine.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
//! 3 I/O or checkpoint error.

pub mod checks;

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwkvx::bench::{
    compare_sparse_full, fit_scaling, gen_passkey_task, measure_decode, measure_prefill, needle_len, render_csv,
    render_report, CompareOptions, LatencyRecord,
};
use rwkvx::model::{expansion_positions, BOS};
use rwkvx::{load_checkpoint, save_checkpoint, Error, Matrix, Mode, Model, ModelConfig, Scalar};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rwkvx", version, about = "RWKV-7 / sparse attention hybrid engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file in `key = value` form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every invariant check and print one line per check.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Run only the named check; repeatable. All checks by default.
        #[arg(long = "check", value_name = "NAME")]
        only: Vec<String>,
        #[arg(long = "inject-fault", value_name = "CHECK", hide = true)]
        inject_fault: Option<String>,
    },
    /// Latency and memory scaling of prefill and decode.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ascending context lengths.
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
        lengths: Vec<usize>,
        /// Directory for bench.csv and bench_report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a freshly initialized base checkpoint.
    Init {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Store 64-bit values instead of 32-bit.
        #[arg(long)]
        f64: bool,
    },
    /// Insert zero-initialized attention blocks into a checkpoint.
    Expand {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Greedy byte-level generation.
    Demo {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        tokens: usize,
    },
    /// Generate a pass-key retrieval prompt.
    GenTask {
        #[arg(long, default_value_t = 4096)]
        length: usize,
        /// Needle start; drawn from the seed when absent.
        #[arg(long)]
        position: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the prompt bytes here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Engine(Error),
    Checks(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Checkpoint(_) => EXIT_IO,
        Error::InvalidConfig(_) | Error::Input(_) | Error::IndexOutOfRange { .. } | Error::InsufficientData(_) => {
            EXIT_USAGE
        }
        _ => EXIT_CHECK_FAILED,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Verify {
            common,
            only,
            inject_fault,
        } => cmd_verify(&common, &only, inject_fault.as_deref(), out),
        Command::Bench {
            common,
            lengths,
            out: dir,
        } => cmd_bench(&common, &lengths, dir.as_deref(), out),
        Command::Init { common, out: path, f64 } => cmd_init(&common, &path, f64, out),
        Command::Expand {
            base,
            ratio,
            out: path,
            seed,
        } => cmd_expand(&base, ratio, &path, seed, out),
        Command::Demo {
            common,
            checkpoint,
            prompt,
            tokens,
        } => cmd_demo(&common, checkpoint.as_deref(), prompt.as_bytes(), tokens, out),
        Command::GenTask {
            length,
            position,
            seed,
            out: path,
        } => cmd_gen_task(length, position, seed, path.as_deref(), out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Checks(msg)) => {
            let _ = writeln!(err, "{msg}");
            EXIT_CHECK_FAILED
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Engine(e)) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(common: &Common) -> rwkvx::Result<ModelConfig> {
    let mut cfg = match &common.config {
        Some(p) => ModelConfig::parse(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => ModelConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) {
    let _ = writeln!(out, "{}", text.as_ref());
}

fn cmd_verify(common: &Common, only: &[String], fault: Option<&str>, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(common)?;
    for f in only.iter().map(String::as_str).chain(fault) {
        if !checks::check_names().any(|n| n == f) {
            let known: Vec<&str> = checks::check_names().collect();
            return Err(Failure::Usage(format!(
                "unknown check `{f}`; known: {}",
                known.join(", ")
            )));
        }
    }
    let selected: Vec<_> = checks::VERIFY_CHECKS
        .into_iter()
        .filter(|(n, _)| only.is_empty() || only.iter().any(|o| o == n))
        .collect();
    let mut failed = Vec::new();
    for &(name, check) in &selected {
        let mut outcome = checks::run_check(name, check, &cfg, common.seed);
        if fault == Some(name) {
            outcome.passed = false;
            outcome.detail = format!("fault injected; {}", outcome.detail);
        }
        if !outcome.passed {
            failed.push(name);
        }
        say(out, outcome.to_string());
    }
    if failed.is_empty() {
        say(out, format!("all {} checks passed", selected.len()));
        Ok(())
    } else {
        Err(Failure::Checks(format!("failed checks: {}", failed.join(", "))))
    }
}

fn exponent(records: &[LatencyRecord], phase: &str) -> String {
    let picked: Vec<LatencyRecord> = records.iter().filter(|r| r.phase.name() == phase).cloned().collect();
    fit_scaling(&picked).map_or_else(|_| "n/a".to_string(), |e| format!("{e:.4}"))
}

fn cmd_bench(common: &Common, lengths: &[usize], dir: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(common)?;
    if lengths.is_empty() {
        return Err(Failure::Usage("--lengths needs at least one value".into()));
    }
    let model: Model<f32> = Model::new(cfg.clone())?;
    let decode_steps = 32.min(lengths[0]).max(16);
    let mut records = measure_prefill(&model, lengths, 3, common.seed)?;
    records.extend(measure_decode(&model, lengths, decode_steps, common.seed)?);
    let opts = CompareOptions {
        seed: common.seed,
        ..CompareOptions::default()
    };
    let cmp = compare_sparse_full::<f32>(&cfg.attn, lengths, opts)?;
    records.extend(cmp.records());

    let fmt_opt = |e: Option<f64>| e.map_or_else(|| "n/a".to_string(), |e| format!("{e:.4}"));
    let summary = vec![
        ("lengths", format!("{lengths:?}")),
        ("chunk_size", cfg.attn.chunk_size.to_string()),
        ("top_k", cfg.attn.top_k.to_string()),
        ("model_prefill_exponent", exponent(&records, "prefill")),
        ("model_decode_exponent", exponent(&records, "decode")),
        ("sparse_prefill_exponent", fmt_opt(cmp.sparse_prefill_exponent)),
        ("full_prefill_exponent", fmt_opt(cmp.full_prefill_exponent)),
        ("sparse_decode_exponent", exponent(&records, "attn_decode_sparse")),
        ("full_decode_exponent", exponent(&records, "attn_decode_full")),
    ];
    let csv = render_csv(&records);
    let report = render_report(&summary, &records);
    match dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
            let csv_path = d.join("bench.csv");
            fs::write(&csv_path, &csv).map_err(|e| io_err(&csv_path, e))?;
            let report_path = d.join("bench_report.txt");
            fs::write(&report_path, &report).map_err(|e| io_err(&report_path, e))?;
            for (k, v) in &summary {
                say(out, format!("{k} = {v}"));
            }
            say(
                out,
                format!("wrote {} and {}", csv_path.display(), report_path.display()),
            );
        }
        None => {
            for (k, v) in &summary {
                say(out, format!("{k} = {v}"));
            }
            let _ = write!(out, "{csv}");
        }
    }
    Ok(())
}

fn cmd_init(common: &Common, path: &Path, wide: bool, out: &mut dyn Write) -> CmdResult {
    let mut cfg = load_config(common)?;
    cfg.seed = common.seed;
    fn save<T: Scalar>(cfg: ModelConfig, path: &Path) -> rwkvx::Result<Model<T>> {
        let model: Model<T> = Model::new(cfg)?;
        save_checkpoint(&model, path)?;
        Ok(model)
    }
    let (layout, params) = if wide {
        let m = save::<f64>(cfg, path)?;
        (m.layout(), m.parameter_count())
    } else {
        let m = save::<f32>(cfg, path)?;
        (m.layout(), m.parameter_count())
    };
    say(out, format!("layout = {layout}"));
    say(out, format!("parameters = {params}"));
    say(out, format!("wrote {}", path.display()));
    Ok(())
}

/// Value width recorded in a checkpoint header, in bytes.
fn checkpoint_width(path: &Path) -> rwkvx::Result<u8> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let width = *bytes.get(12).ok_or(rwkvx::CheckpointError::Truncated("header"))?;
    Ok(width)
}

fn same_bits<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
}

fn expand_typed<T: Scalar>(base: &Path, ratio: f64, path: &Path, seed: u64, out: &mut dyn Write) -> CmdResult {
    let model = load_checkpoint::<T>(base)?;
    let positions = expansion_positions(model.layers().len(), ratio)?;
    let expanded = model.expand_blocks(&positions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = 8;
    let mut identical = 0;
    for _ in 0..inputs {
        let len = rng.gen_range(1..=64);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..256)).collect();
        let (a, _) = model.forward(&tokens, Mode::Prefill)?;
        let (b, _) = expanded.forward(&tokens, Mode::Prefill)?;
        identical += same_bits(&a, &b) as usize;
    }
    save_checkpoint(&expanded, path)?;
    say(out, format!("base layout = {}", model.layout()));
    say(out, format!("expanded layout = {}", expanded.layout()));
    say(out, format!("inserted at {positions:?}"));
    let ok = identical == inputs;
    say(
        out,
        format!(
            "{} identity at init: {identical}/{inputs} inputs bitwise equal",
            if ok { "PASS" } else { "FAIL" }
        ),
    );
    say(out, format!("wrote {}", path.display()));
    if ok {
        Ok(())
    } else {
        Err(Failure::Checks("expanded model differs from its base".into()))
    }
}

fn cmd_expand(base: &Path, ratio: f64, path: &Path, seed: u64, out: &mut dyn Write) -> CmdResult {
    match checkpoint_width(base)? {
        8 => expand_typed::<f64>(base, ratio, path, seed, out),
        _ => expand_typed::<f32>(base, ratio, path, seed, out),
    }
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn escape(tokens: &[usize]) -> String {
    let mut s = String::new();
    for &t in tokens {
        match u8::try_from(t) {
            Ok(b) if b.is_ascii_graphic() || b == b' ' => s.push(b as char),
            Ok(b) => write!(s, "\\x{b:02x}").unwrap(),
            Err(_) => write!(s, "<{t}>").unwrap(),
        }
    }
    s
}

fn demo_typed<T: Scalar>(model: &Model<T>, prompt: &[u8], n_tokens: usize, out: &mut dyn Write) -> CmdResult {
    let mut tokens: Vec<usize> = prompt.iter().map(|&b| b as usize).collect();
    if tokens.is_empty() {
        tokens.push(BOS);
    }
    let (logits, mut state) = model.prefill(&tokens)?;
    let mut next = argmax(logits.row(logits.rows() - 1));
    let mut peak = state.cache_entries();
    let mut generated = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        generated.push(next);
        let row = model.decode(next, &mut state)?;
        peak = peak.max(state.cache_entries());
        next = argmax(&row);
    }
    let total = tokens.len() + generated.len();
    let attn = &model.config().attn;
    let bound = attn.cache_capacity().map_or(total, |cap| total.min(cap));
    say(out, format!("prompt_tokens = {}", tokens.len()));
    say(out, format!("generated = \"{}\"", escape(&generated)));
    let ids: Vec<String> = generated.iter().map(|t| t.to_string()).collect();
    say(out, format!("generated_ids = [{}]", ids.join(", ")));
    say(out, format!("total_len = {total}"));
    if state.has_attention_state() {
        say(out, format!("peak_entries = {peak}"));
        say(out, format!("expected_peak_entries = {bound}"));
    } else {
        say(out, "peak_entries = 0 (no attention layers)");
    }
    Ok(())
}

fn cmd_demo(
    common: &Common,
    checkpoint: Option<&Path>,
    prompt: &[u8],
    n_tokens: usize,
    out: &mut dyn Write,
) -> CmdResult {
    if n_tokens < 1 {
        return Err(Failure::Usage("--tokens must be >= 1".into()));
    }
    match checkpoint {
        Some(p) => match checkpoint_width(p)? {
            8 => demo_typed(&load_checkpoint::<f64>(p)?, prompt, n_tokens, out),
            _ => demo_typed(&load_checkpoint::<f32>(p)?, prompt, n_tokens, out),
        },
        None => {
            let mut cfg = load_config(common)?;
            cfg.seed = common.seed;
            demo_typed(&Model::<f32>::new(cfg)?, prompt, n_tokens, out)
        }
    }
}

fn cmd_gen_task(
    length: usize,
    position: Option<usize>,
    seed: u64,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    let position = match position {
        Some(p) => p,
        None => {
            let room = length.saturating_sub(needle_len());
            ChaCha8Rng::seed_from_u64(seed).gen_range(0..=room)
        }
    };
    let task = gen_passkey_task(length, position, seed)?;
    let prompt: Vec<u8> = task.prompt().iter().map(|&t| t as u8).collect();
    let answer: String = task.answer.iter().map(|&t| t as u8 as char).collect();
    say(out, format!("context_len = {}", task.context.len()));
    say(out, format!("needle_position = {}", task.needle_position));
    say(out, format!("answer = \"{answer}\""));
    match path {
        Some(p) => {
            fs::write(p, &prompt).map_err(|e| io_err(p, e))?;
            say(out, format!("wrote {}", p.display()));
        }
        None => say(out, String::from_utf8_lossy(&prompt)),
    }
    Ok(())
}
