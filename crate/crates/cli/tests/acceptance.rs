//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs without the libtest harness so criteria execute one after
//! another and the timing criterion sees an otherwise idle process.

use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rwkvx::bench::CSV_HEADER;
use rwkvx::{load_checkpoint, AttnConfig, Mode, Model, ModelConfig};
use rwkvx_cli::checks::{self, CheckOutcome};

const SEED: u64 = 0;

struct Line {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    limit: Duration,
}

fn criterion(id: usize, title: &'static str, limit_s: u64, body: impl FnOnce() -> (bool, String)) -> Line {
    let start = Instant::now();
    let (passed, detail) = body();
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(limit_s);
    let line = Line {
        id,
        title,
        passed: passed && elapsed <= limit,
        detail,
        elapsed,
        limit,
    };
    println!(
        "{} [{}] {}: {} ({:.1}s, limit {}s)",
        if line.passed { "PASS" } else { "FAIL" },
        line.id,
        line.title,
        line.detail,
        line.elapsed.as_secs_f64(),
        line.limit.as_secs()
    );
    line
}

fn from_check(f: fn(&ModelConfig, u64) -> rwkvx::Result<CheckOutcome>) -> (bool, String) {
    match f(&ModelConfig::default(), SEED) {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    }
}

fn scaling() -> (bool, String) {
    let lengths = [4096, 8192, 16384, 32768, 65536];
    let attn = AttnConfig {
        chunk_size: 128,
        top_k: 4,
        d_k: 64,
        d_v: 64,
        cache_budget: Some(1024),
        obs_window: 128,
    };
    let r = match checks::scaling(&attn, &lengths, SEED) {
        Ok(r) => r,
        Err(e) => return (false, format!("error: {e}")),
    };
    let informational = checks::sparse_prefill_exponent(
        &AttnConfig {
            chunk_size: 64,
            obs_window: 64,
            ..attn
        },
        &lengths,
        SEED,
    )
    .map_or_else(|e| format!("error: {e}"), |e| format!("{e:.3}"));
    let ok =
        (0.8..=1.3).contains(&r.sparse_exponent) && (1.7..=2.3).contains(&r.full_exponent) && r.decode_ratio <= 1.5;
    let times: Vec<String> = r
        .lengths
        .iter()
        .zip(&r.sparse_prefill)
        .zip(&r.full_prefill)
        .map(|((n, s), f)| format!("{}K {s:.3}s/{f:.1}s", n / 1024))
        .collect();
    (
        ok,
        format!(
            "sparse exponent {:.3} in [0.8, 1.3]; full exponent {:.3} in [1.7, 2.3]; decode 64K/8K = {:.3} <= 1.5 \
             (B=128, k=4, d=64, f32; sparse/full prefill: {}; B=64 sparse exponent {informational}, informational)",
            r.sparse_exponent,
            r.full_exponent,
            r.decode_ratio,
            times.join(", ")
        ),
    )
}

fn scratch_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rwkvx-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

fn command_contract() -> (bool, String) {
    let bin = env!("CARGO_BIN_EXE_rwkvx");
    let dir = scratch_dir();
    let mut notes = Vec::new();
    let mut ok = true;
    let mut note = |pass: bool, text: String| {
        ok &= pass;
        notes.push(text);
    };

    let verify = Command::new(bin).arg("verify").output().expect("run verify");
    note(
        verify.status.code() == Some(0),
        format!("verify exit {:?}", verify.status.code()),
    );

    let bench_dir = dir.join("bench");
    let bench = Command::new(bin)
        .args(["bench", "--lengths", "256,512,1024", "--out"])
        .arg(&bench_dir)
        .output()
        .expect("run bench");
    let csv = std::fs::read_to_string(bench_dir.join("bench.csv")).unwrap_or_default();
    let mut lines = csv.lines();
    let header_ok = lines.next() == Some(CSV_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let rows_ok = rows.len() == 6 * 3
        && rows.iter().all(|r| {
            r.len() == 5
                && r[1].parse::<usize>().is_ok()
                && r[2].parse::<f64>().is_ok_and(|t| t > 0.0)
                && r[3].parse::<usize>().is_ok()
                && r[4].parse::<usize>().is_ok()
        });
    note(
        bench.status.code() == Some(0) && header_ok && rows_ok,
        format!(
            "bench exit {:?}, header ok {header_ok}, {} well-formed rows",
            bench.status.code(),
            rows.len()
        ),
    );

    let ckpt = dir.join("model.ckpt");
    let init = Command::new(bin)
        .args(["init", "--seed", "7", "--out"])
        .arg(&ckpt)
        .output()
        .expect("run init");
    let round_trip = (|| -> rwkvx::Result<bool> {
        let loaded = load_checkpoint::<f32>(&ckpt)?;
        let fresh: Model<f32> = Model::new(ModelConfig {
            seed: 7,
            ..ModelConfig::default()
        })?;
        let tokens: Vec<usize> = (0..200).map(|i| (i * 37 + 11) % 256).collect();
        let (a, _) = loaded.forward(&tokens, Mode::Prefill)?;
        let (b, _) = fresh.forward(&tokens, Mode::Prefill)?;
        Ok(loaded == fresh && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    })();
    let in_process = from_check(checks::checkpoint_round_trip).0;
    note(
        init.status.code() == Some(0) && matches!(round_trip, Ok(true)) && in_process,
        format!("save->load->forward bitwise: cli {round_trip:?}, in-process {in_process}"),
    );

    let bad = Command::new(bin)
        .args(["verify", "--set", "top_k=0"])
        .output()
        .expect("run verify");
    note(
        bad.status.code() == Some(2),
        format!("top_k=0 exit {:?}", bad.status.code()),
    );
    let fault = Command::new(bin)
        .args([
            "verify",
            "--check",
            "gradient_check",
            "--check",
            "rwkv7_recurrence",
            "--inject-fault",
            "gradient_check",
        ])
        .output()
        .expect("run verify");
    let report = String::from_utf8_lossy(&fault.stdout);
    let named = report.contains("FAIL gradient_check") && report.contains("PASS rwkv7_recurrence");
    note(
        fault.status.code() == Some(1) && named,
        format!("injected fault exit {:?}, named {named}", fault.status.code()),
    );

    std::fs::remove_dir_all(&dir).ok();
    (ok, notes.join("; "))
}

fn main() {
    let lines = [
        criterion(1, "oracle equivalence", 30, || from_check(checks::oracle_equivalence)),
        criterion(2, "decode/prefill consistency", 60, || {
            from_check(checks::decode_prefill_consistency)
        }),
        criterion(3, "constant-memory decode", 60, || {
            from_check(checks::constant_memory_decode)
        }),
        criterion(4, "attended-set bound", 60, || from_check(checks::attended_set_bound)),
        criterion(5, "scaling exponents", 900, scaling),
        criterion(6, "block-expansion identity", 30, || {
            from_check(checks::expansion_identity)
        }),
        criterion(7, "gradient check", 60, || from_check(checks::gradient_check)),
        criterion(8, "RWKV-7 recurrence", 30, || from_check(checks::rwkv7_recurrence)),
        criterion(9, "KV compression", 30, || from_check(checks::kv_compression)),
        criterion(10, "command contract", 120, command_contract),
    ];
    let failed: Vec<String> = lines.iter().filter(|l| !l.passed).map(|l| l.id.to_string()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", lines.len());
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
