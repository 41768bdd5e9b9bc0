//! Command-line front end. Every subcommand builds its world from the
//! resolved config plus the seed, runs one experiment, writes CSV into the
//! output directory, and prints a one-line JSON summary. Identical flags and
//! seed reproduce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cachechan::attacks::aes::collect_template;
use cachechan::attacks::AttackError;
use cachechan::channel::ChannelError;
use cachechan::detector::{
    classify_trace, parse_counter_csv, write_counter_csv, write_rows_csv, DetectorConfig,
    DetectorError, Label, MonitorRow, TraceSample,
};
use cachechan::probes::{
    build_eviction_set, calibrate_access_timing, calibrate_flush_timing, calibrate_set_timing,
    Polarity, PrimedSet, ProbeError, SimBackend, Technique, Threshold,
};
use cachechan::scenario::{
    aes_cache_config, run_aes, run_covert, run_keylog, run_slicemap, stealth_matrix, MatrixRow,
    ScenarioError, StealthMatrix, Tuning, AES_TABLE_BASE, ATTACK_PP_REGION,
};
use cachechan::victims::AesTTableVictim;
use cachechan::{CacheConfig, ConfigError, MemError, MemorySystem};

#[derive(Parser)]
#[command(
    name = "cachechan",
    version,
    about = "Cache timing-channel toolkit: probes, covert channels, attacks, detection",
    disable_help_subcommand = true
)]
struct Cli {
    /// TOML config file; keys it omits keep their defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Latency preset: haswell, ivybridge, sandybridge
    #[arg(long, global = true, env = "CACHECHAN_PRESET", value_name = "NAME")]
    preset: Option<String>,

    /// Simulation seed, echoed into every output
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Directory the CSV files land in
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out_dir: PathBuf,

    /// Override the uniform latency jitter bound
    #[arg(long, global = true, value_name = "CYCLES")]
    jitter: Option<u64>,

    /// Countermeasure toggle: flush latency independent of cache state
    #[arg(long, global = true)]
    constant_time_flush: bool,

    /// Enable the next-line prefetcher
    #[arg(long, global = true)]
    prefetcher: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time a probe primitive against active and idle lines, write the
    /// latency histogram, and report the threshold between the clusters
    Calibrate {
        /// ff, fr, or pp
        #[arg(long, default_value = "ff")]
        technique: String,
        #[arg(long, default_value_t = 4000)]
        rounds: u32,
        /// sim or hw; hw needs the `hw` build feature and a 64-bit x86
        /// Linux host, anything else falls back to sim with a warning
        #[arg(long, default_value = "sim")]
        backend: String,
    },
    /// Push a message through the covert channel and report its metrics
    Covert {
        /// ff, fr, or pp
        #[arg(long, default_value = "ff")]
        technique: String,
        #[arg(long, default_value_t = 28)]
        packet_size: usize,
        /// Payload file; a built-in phrase when absent
        #[arg(long, value_name = "FILE")]
        message: Option<PathBuf>,
    },
    /// Classify actor counter profiles as benign or malicious
    Detect {
        /// Counter CSV to classify (as written by aes-attack or the monitor)
        #[arg(long, value_name = "FILE", conflicts_with = "live_sim")]
        trace: Option<PathBuf>,
        /// Run a scenario and classify its actors: matrix, covert, aes, keylog
        #[arg(long, value_name = "SCENARIO")]
        live_sim: Option<String>,
        /// Malicious when cache_misses/itlb reaches this
        #[arg(long, value_name = "RATIO")]
        k_m: Option<f64>,
        /// Malicious when cache_references/itlb reaches this
        #[arg(long, value_name = "RATIO")]
        k_r: Option<f64>,
    },
    /// Recover the upper nibble of each AES first-round key byte
    AesAttack {
        /// ff, fr, or pp
        #[arg(long, default_value = "ff")]
        technique: String,
        /// Probe two table lines per encryption (ff only)
        #[arg(long)]
        multi_line: bool,
        /// Key as 32 hex chars; derived from the seed when absent
        #[arg(long, value_name = "HEX")]
        key: Option<String>,
        /// Key byte the profiling template is collected for
        #[arg(long, default_value_t = 0)]
        template_byte: usize,
        #[arg(long, default_value_t = 16)]
        template_rounds: u32,
    },
    /// Spy on a simulated keystroke handler and score the detections
    KeylogSim {
        /// ff, fr, or pp
        #[arg(long, default_value = "ff")]
        technique: String,
        /// Monitored library addresses, 1 to 3
        #[arg(long, default_value_t = 1)]
        addresses: usize,
        #[arg(long, default_value_t = 1000)]
        events: usize,
    },
    /// Recover the address-to-slice mapping from flush timing
    SliceMap {
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
}

/// Failure with the exit code it maps to: 1 usage or internal, 2 calibration
/// or infeasible configuration, 3 attack ran but could not conclude.
struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

impl From<ProbeError> for Failure {
    fn from(e: ProbeError) -> Self {
        let code = match &e {
            ProbeError::CalibrationFailure { .. } | ProbeError::RegionExhausted { .. } => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<ChannelError> for Failure {
    fn from(e: ChannelError) -> Self {
        match e {
            ChannelError::EvictionSetsInfeasible { .. } => {
                Failure { code: 2, msg: e.to_string() }
            }
            ChannelError::TransmissionFailure { .. } => Failure { code: 3, msg: e.to_string() },
            ChannelError::Probe(p) => p.into(),
            other => Failure { code: 1, msg: other.to_string() },
        }
    }
}

impl From<AttackError> for Failure {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::MappingFailed { .. } => Failure { code: 2, msg: e.to_string() },
            AttackError::Probe(p) => p.into(),
            other => Failure { code: 1, msg: other.to_string() },
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Channel(c) => c.into(),
            ScenarioError::Probe(p) => p.into(),
            ScenarioError::Attack(a) => a.into(),
            other => Failure { code: 1, msg: other.to_string() },
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        usage(e.to_string())
    }
}

impl From<MemError> for Failure {
    fn from(e: MemError) -> Self {
        Failure { code: 1, msg: e.to_string() }
    }
}

impl From<DetectorError> for Failure {
    fn from(e: DetectorError) -> Self {
        usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, msg: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            _ => {
                eprint!("{e}");
                return ExitCode::from(1);
            }
        },
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// The resolved cache config plus a label saying where its base came from.
struct Resolved {
    mem: CacheConfig,
    base: String,
}

fn resolve(cli: &Cli) -> Result<Resolved, Failure> {
    let (mut mem, base) = if let Some(path) = &cli.config {
        if cli.preset.is_some() {
            eprintln!("note: --config takes precedence; preset ignored");
        }
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        (CacheConfig::from_toml(&text)?, format!("file:{}", path.display()))
    } else if let Some(name) = &cli.preset {
        (CacheConfig::preset(name)?, name.clone())
    } else {
        (CacheConfig::default(), "default".to_string())
    };
    mem.seed = cli.seed;
    if let Some(j) = cli.jitter {
        mem.jitter_bound = j;
    }
    if cli.constant_time_flush {
        mem.constant_time_flush = true;
    }
    if cli.prefetcher {
        mem.prefetch_next_line = true;
    }
    mem.validate()?;
    Ok(Resolved { mem, base })
}

/// Two comment lines prepended to every CSV: run identity, then the latency
/// bases the numbers rest on. `base` names where the config came from; the
/// canned attack harnesses pass their own fixed configs here, not the
/// resolved one, so the header describes the machine that actually ran.
fn preamble_for(m: &CacheConfig, base: &str, cmd: &str) -> String {
    let l = &m.latencies;
    format!(
        "# cmd={cmd} seed={} base={} jitter={} constant_time_flush={} prefetch={}\n\
         # latencies l1={} l2={} l3_local={} l3_remote_penalty={} dram={} flush_miss={} \
         flush_hit_delta={} flush_remote_penalty={} cycles_per_second={}\n",
        m.seed,
        base,
        m.jitter_bound,
        m.constant_time_flush,
        m.prefetch_next_line,
        l.l1_hit,
        l.l2_hit,
        l.l3_local_hit,
        l.l3_remote_penalty,
        l.dram,
        l.flush_miss,
        l.flush_hit_delta,
        l.flush_remote_penalty,
        m.cycles_per_second,
    )
}

fn preamble(r: &Resolved, cmd: &str) -> String {
    preamble_for(&r.mem, &r.base, cmd)
}

/// The config run_keylog builds internally, reproduced for the CSV header.
fn keylog_harness_config(tuning: &Tuning, seed: u64) -> CacheConfig {
    CacheConfig { jitter_bound: tuning.keylog_jitter, seed, ..CacheConfig::default() }
}

fn write_output(dir: &Path, name: &str, content: &[u8]) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, content)?;
    Ok(path)
}

fn parse_technique(s: &str) -> Result<Technique, Failure> {
    Technique::parse(s).ok_or_else(|| usage(format!("unknown technique `{s}` (ff, fr, pp)")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let resolved = resolve(&cli)?;
    match &cli.cmd {
        Cmd::Calibrate { technique, rounds, backend } => {
            cmd_calibrate(&cli, &resolved, technique, *rounds, backend)
        }
        Cmd::Covert { technique, packet_size, message } => {
            cmd_covert(&cli, &resolved, technique, *packet_size, message.as_deref())
        }
        Cmd::Detect { trace, live_sim, k_m, k_r } => {
            cmd_detect(&cli, &resolved, trace.as_deref(), live_sim.as_deref(), *k_m, *k_r)
        }
        Cmd::AesAttack { technique, multi_line, key, template_byte, template_rounds } => {
            cmd_aes(&cli, technique, *multi_line, key.as_deref(), *template_byte, *template_rounds)
        }
        Cmd::KeylogSim { technique, addresses, events } => {
            cmd_keylog(&cli, technique, *addresses, *events)
        }
        Cmd::SliceMap { count } => cmd_slicemap(&cli, &resolved, *count),
    }
}

/// Lowest line address whose slice is local to `core`, so flush-hit timing
/// carries no ring-bus penalty and the cluster gap equals the configured
/// delta.
fn local_line(mem: &CacheConfig, core: usize) -> Result<u64, Failure> {
    let want = mem.local_slice(core);
    (0..4096u64)
        .map(|i| i * mem.line_size)
        .find(|&a| mem.slice_of(a) == want)
        .ok_or_else(|| usage("no line maps to the calibrator's local slice".to_string()))
}

fn cluster_gap(thr: &Threshold) -> i64 {
    let lo = |h: &std::collections::BTreeMap<u64, u64>| h.keys().next().copied().unwrap_or(0);
    let hi = |h: &std::collections::BTreeMap<u64, u64>| h.keys().last().copied().unwrap_or(0);
    match thr.polarity {
        Polarity::ActiveAtOrAbove => lo(&thr.active_hist) as i64 - hi(&thr.idle_hist) as i64,
        Polarity::ActiveBelow => lo(&thr.idle_hist) as i64 - hi(&thr.active_hist) as i64,
    }
}

fn calibrate_summary(
    technique: Technique,
    backend: &str,
    rounds: u32,
    seed: u64,
    thr: &Threshold,
    csv: &Path,
) -> String {
    let polarity = match thr.polarity {
        Polarity::ActiveAtOrAbove => "active_at_or_above",
        Polarity::ActiveBelow => "active_below",
    };
    format!(
        "{{\"cmd\":\"calibrate\",\"technique\":\"{}\",\"backend\":\"{backend}\",\
         \"rounds\":{rounds},\"boundary\":{},\"polarity\":\"{polarity}\",\"gap\":{},\
         \"active_mean\":{:.6},\"idle_mean\":{:.6},\"seed\":{seed},\"csv\":\"{}\"}}",
        technique.as_str(),
        thr.boundary,
        cluster_gap(thr),
        thr.active_mean(),
        thr.idle_mean(),
        csv.display(),
    )
}

fn cmd_calibrate(
    cli: &Cli,
    r: &Resolved,
    technique: &str,
    rounds: u32,
    backend: &str,
) -> Result<(), Failure> {
    let technique = parse_technique(technique)?;
    let mut use_hw = match backend {
        "sim" => false,
        "hw" => true,
        other => return Err(usage(format!("unknown backend `{other}` (sim, hw)"))),
    };
    if use_hw && technique == Technique::Pp {
        return Err(usage("hardware backend calibrates ff and fr only"));
    }
    if use_hw && !hw_available() {
        eprintln!("warning: hardware backend unavailable in this build/host; using simulator");
        use_hw = false;
    }

    let thr = if use_hw {
        hw_calibrate(technique, rounds)?
    } else {
        let mut sys = MemorySystem::new(r.mem.clone())?;
        let cal = sys.register_actor("calibrator", 0, 1)?;
        let target = local_line(&r.mem, 0)?;
        let mut b = SimBackend::new(&mut sys, cal);
        match technique {
            Technique::Ff => calibrate_flush_timing(&mut b, target, rounds)?,
            Technique::Fr => calibrate_access_timing(&mut b, target, rounds)?,
            Technique::Pp => {
                let mem = r.mem.clone();
                let mut cursor = ATTACK_PP_REGION.start;
                let set =
                    build_eviction_set(&mem, ATTACK_PP_REGION, &mut cursor, target)?;
                let mut ps = PrimedSet::new(set);
                calibrate_set_timing(&mut b, &mut ps, target, rounds)?
            }
        }
    };

    let backend_label = if use_hw { "hw" } else { "sim" };
    let mut body = preamble(r, "calibrate").into_bytes();
    if use_hw {
        body.extend_from_slice(b"# backend=hw latencies above do not apply\n");
    }
    let mut hist = Vec::new();
    thr.write_histogram_csv(&mut hist)?;
    body.extend_from_slice(&hist);
    let name = format!("calibrate_{}.csv", technique.as_str());
    let path = write_output(&cli.out_dir, &name, &body)?;
    println!(
        "{}",
        calibrate_summary(technique, backend_label, rounds, cli.seed, &thr, &path)
    );
    Ok(())
}

#[cfg(feature = "hw")]
fn hw_available() -> bool {
    cachechan::hw::supported()
}

#[cfg(not(feature = "hw"))]
fn hw_available() -> bool {
    false
}

#[cfg(feature = "hw")]
fn hw_calibrate(technique: Technique, rounds: u32) -> Result<Threshold, Failure> {
    use cachechan::hw::{HwBackend, HwBackendConfig};
    let cfg = HwBackendConfig { rounds, ..HwBackendConfig::default() };
    let mut b = HwBackend::new(&cfg)?;
    // One page in, away from whatever shares the mapping's first lines.
    let target = 4096;
    let thr = match technique {
        Technique::Ff => calibrate_flush_timing(&mut b, target, rounds)?,
        Technique::Fr => calibrate_access_timing(&mut b, target, rounds)?,
        Technique::Pp => unreachable!("rejected before backend setup"),
    };
    Ok(thr)
}

#[cfg(not(feature = "hw"))]
fn hw_calibrate(_technique: Technique, _rounds: u32) -> Result<Threshold, Failure> {
    unreachable!("hw_available() is false without the feature")
}

const DEFAULT_MESSAGE: &[u8] =
    b"the quick brown fox jumps over the lazy dog while the cache watches every step it takes";

fn cmd_covert(
    cli: &Cli,
    r: &Resolved,
    technique: &str,
    packet_size: usize,
    message: Option<&Path>,
) -> Result<(), Failure> {
    let technique = parse_technique(technique)?;
    let payload: Vec<u8> = match message {
        Some(p) => fs::read(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => DEFAULT_MESSAGE.to_vec(),
    };
    if payload.is_empty() {
        return Err(usage("message is empty"));
    }
    let tuning = Tuning::default();
    let name = format!("covert_{}.csv", technique.as_str());
    let run = match run_covert(&r.mem, &tuning, technique, packet_size, &payload) {
        Ok(run) => run,
        Err(ScenarioError::Channel(ChannelError::TransmissionFailure {
            packet,
            attempts,
            metrics,
        })) => {
            // The run died mid-transfer; its metrics still tell the story.
            let mut body = preamble(r, "covert").into_bytes();
            let mut csv = Vec::new();
            metrics.write_csv(&mut csv)?;
            body.extend_from_slice(&csv);
            write_output(&cli.out_dir, &name, &body)?;
            return Err(ChannelError::TransmissionFailure { packet, attempts, metrics }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let m = &run.outcome.metrics;
    let mut body = preamble(r, "covert").into_bytes();
    let mut csv = Vec::new();
    m.write_csv(&mut csv)?;
    body.extend_from_slice(&csv);
    let path = write_output(&cli.out_dir, &name, &body)?;
    println!(
        "{{\"cmd\":\"covert\",\"technique\":\"{}\",\"packet_size\":{packet_size},\
         \"bytes\":{},\"delivered\":{},\"bit_errors\":{},\"error_rate\":{:.6},\
         \"retransmissions\":{},\"rate_bytes_per_sec\":{:.6},\"runtime_cycles\":{},\
         \"seed\":{},\"csv\":\"{}\"}}",
        technique.as_str(),
        payload.len(),
        run.outcome.message == payload,
        m.bit_errors,
        m.error_rate,
        m.retransmissions,
        m.rate_bytes_per_sec,
        m.runtime_cycles,
        cli.seed,
        path.display(),
    )
    ;
    Ok(())
}

fn label_counts(rows: &[MonitorRow]) -> (usize, usize, usize) {
    let mut benign = 0;
    let mut malicious = 0;
    let mut indeterminate = 0;
    for row in rows {
        match row.outcome.map(|c| c.label) {
            Some(Label::Benign) => benign += 1,
            Some(Label::Malicious) => malicious += 1,
            None => indeterminate += 1,
        }
    }
    (benign, malicious, indeterminate)
}

fn matrix_counts(rows: &[MatrixRow]) -> (usize, usize, usize) {
    let mut benign = 0;
    let mut malicious = 0;
    let mut indeterminate = 0;
    for row in rows {
        match row.classification.as_ref().map(|c| c.label) {
            Some(Label::Benign) => benign += 1,
            Some(Label::Malicious) => malicious += 1,
            None => indeterminate += 1,
        }
    }
    (benign, malicious, indeterminate)
}

fn cmd_detect(
    cli: &Cli,
    r: &Resolved,
    trace: Option<&Path>,
    live_sim: Option<&str>,
    k_m: Option<f64>,
    k_r: Option<f64>,
) -> Result<(), Failure> {
    let mut dc = DetectorConfig::default();
    if let Some(v) = k_m {
        dc.k_m = v;
    }
    if let Some(v) = k_r {
        dc.k_r = v;
    }

    if let Some(path) = trace {
        let file = fs::File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let samples = parse_counter_csv(BufReader::new(file))?;
        let rows = classify_trace(&dc, &samples);
        // The machine that produced the trace is described in the trace
        // file itself; this header carries only the classifier settings.
        let mut body = format!(
            "# cmd=detect k_m={:.6} k_r={:.6} sampling_interval={}\n",
            dc.k_m, dc.k_r, dc.sampling_interval
        )
        .into_bytes();
        let mut csv = Vec::new();
        write_rows_csv(&rows, &mut csv)?;
        body.extend_from_slice(&csv);
        let out = write_output(&cli.out_dir, "detect_rows.csv", &body)?;
        let (benign, malicious, indeterminate) = label_counts(&rows);
        println!(
            "{{\"cmd\":\"detect\",\"source\":\"trace\",\"k_m\":{:.6},\"k_r\":{:.6},\
             \"rows\":{},\"benign\":{benign},\"malicious\":{malicious},\
             \"indeterminate\":{indeterminate},\"csv\":\"{}\"}}",
            dc.k_m,
            dc.k_r,
            rows.len(),
            out.display(),
        );
        return Ok(());
    }

    let scenario = live_sim.ok_or_else(|| usage("detect needs --trace or --live-sim"))?;
    let tuning = Tuning::default();
    let matrix = match scenario {
        // Full battery with end-to-end threshold calibration.
        "matrix" => stealth_matrix(&tuning, cli.seed)?,
        // Single scenario family classified under the configured thresholds.
        "covert" | "aes" | "keylog" => {
            let mut rows = Vec::new();
            match scenario {
                "covert" => {
                    let mut msg = vec![0u8; tuning.covert_matrix_message];
                    ChaCha8Rng::seed_from_u64(cli.seed.wrapping_add(11)).fill(&mut msg[..]);
                    for technique in [Technique::Ff, Technique::Fr, Technique::Pp] {
                        let packet = if technique == Technique::Pp { 5 } else { 28 };
                        let run = run_covert(&r.mem, &tuning, technique, packet, &msg)?;
                        let scen = format!("covert_{}", technique.as_str());
                        rows.push(raw_row(&scen, "covert_tx", run.tx));
                        rows.push(raw_row(&scen, "covert_rx", run.rx));
                    }
                }
                "aes" => {
                    let mut key = [0u8; 16];
                    ChaCha8Rng::seed_from_u64(cli.seed.wrapping_add(12)).fill(&mut key);
                    for technique in [Technique::Ff, Technique::Fr, Technique::Pp] {
                        let run = run_aes(&tuning, technique, false, key, cli.seed)?;
                        let scen = format!("aes_{}", technique.as_str());
                        rows.push(raw_row(&scen, "aes_attacker", run.attacker));
                        rows.push(raw_row(&scen, "aes_victim", run.victim));
                    }
                }
                _ => {
                    for technique in [Technique::Ff, Technique::Fr, Technique::Pp] {
                        let run = run_keylog(
                            &tuning,
                            technique,
                            1,
                            tuning.matrix_keylog_events,
                            cli.seed,
                        )?;
                        let scen = format!("keylog_{}", technique.as_str());
                        rows.push(raw_row(&scen, "keylog_spy", run.spy));
                    }
                }
            }
            let mut m = StealthMatrix { thresholds: dc, rows };
            for row in m.rows.iter_mut() {
                row.classification = cachechan::detector::classify(&m.thresholds, &row.sample).ok();
            }
            m
        }
        other => {
            return Err(usage(format!(
                "unknown scenario `{other}` (matrix, covert, aes, keylog)"
            )))
        }
    };

    let tuning_header = match scenario {
        "matrix" => {
            let mem = CacheConfig {
                jitter_bound: tuning.covert_jitter,
                seed: cli.seed,
                ..CacheConfig::default()
            };
            preamble_for(&mem, "matrix-harness", "detect")
                + "# aes and keylog rows ran on their own harness configs\n"
        }
        "aes" => preamble_for(&aes_cache_config(cli.seed), "aes-harness", "detect"),
        "keylog" => {
            preamble_for(&keylog_harness_config(&tuning, cli.seed), "keylog-harness", "detect")
        }
        _ => preamble(r, "detect"),
    };
    let mut body = tuning_header.into_bytes();
    body.extend_from_slice(
        format!("# k_m={:.6} k_r={:.6}\n", matrix.thresholds.k_m, matrix.thresholds.k_r)
            .as_bytes(),
    );
    let mut csv = Vec::new();
    matrix.write_csv(&mut csv)?;
    body.extend_from_slice(&csv);
    let name = format!("detect_{scenario}.csv");
    let out = write_output(&cli.out_dir, &name, &body)?;
    let (benign, malicious, indeterminate) = matrix_counts(&matrix.rows);
    println!(
        "{{\"cmd\":\"detect\",\"source\":\"{scenario}\",\"k_m\":{:.6},\"k_r\":{:.6},\
         \"rows\":{},\"benign\":{benign},\"malicious\":{malicious},\
         \"indeterminate\":{indeterminate},\"seed\":{},\"csv\":\"{}\"}}",
        matrix.thresholds.k_m,
        matrix.thresholds.k_r,
        matrix.rows.len(),
        cli.seed,
        out.display(),
    );
    Ok(())
}

fn raw_row(scenario: &str, actor: &str, sample: cachechan::CounterSample) -> MatrixRow {
    MatrixRow {
        scenario: scenario.to_string(),
        actor: actor.to_string(),
        sample,
        classification: None,
    }
}

fn nibble_hex(nibbles: &[u8; 16]) -> String {
    nibbles.iter().map(|n| format!("{n:x}")).collect()
}

fn cmd_aes(
    cli: &Cli,
    technique: &str,
    multi_line: bool,
    key: Option<&str>,
    template_byte: usize,
    template_rounds: u32,
) -> Result<(), Failure> {
    let technique = parse_technique(technique)?;
    if multi_line && technique != Technique::Ff {
        return Err(usage("--multi-line applies to the ff technique only"));
    }
    if template_byte >= 16 {
        return Err(usage("--template-byte must be 0..16"));
    }
    let key: [u8; 16] = match key {
        Some(hexstr) => {
            let bytes = hex::decode(hexstr).map_err(|e| usage(format!("--key: {e}")))?;
            bytes
                .try_into()
                .map_err(|_| usage("--key must be exactly 16 bytes (32 hex chars)"))?
        }
        None => {
            let mut k = [0u8; 16];
            ChaCha8Rng::seed_from_u64(cli.seed.wrapping_add(12)).fill(&mut k);
            k
        }
    };

    let tuning = Tuning::default();
    let run = run_aes(&tuning, technique, multi_line, key, cli.seed)?;
    let report = &run.report;
    let header = preamble_for(&aes_cache_config(cli.seed), "aes-harness", "aes-attack");

    // Report CSV: one row.
    let mut body = header.clone().into_bytes();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "technique,multi_line,success,conclusive_bytes,encryptions,probes,min_margin,recovered,expected"
    );
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{:.6},{},{}",
        report.technique.as_str(),
        report.multi_line,
        report.success,
        report.conclusive.iter().filter(|&&c| c).count(),
        report.encryptions,
        report.probes,
        report.min_margin,
        nibble_hex(&report.recovered),
        nibble_hex(&report.expected),
    );
    body.extend_from_slice(s.as_bytes());
    let report_path = write_output(&cli.out_dir, "aes_report.csv", &body)?;

    // Profiling template on a fresh system with the same key and geometry.
    let mut sys = MemorySystem::new(aes_cache_config(cli.seed))?;
    let attacker = sys.register_actor("aes_attacker", 0, tuning.itlb_attacker)?;
    let cal = sys.register_actor("aes_cal", 0, tuning.itlb_attacker)?;
    let vic = sys.register_actor("aes_victim", 1, tuning.itlb_victim)?;
    let mut victim =
        AesTTableVictim::new(vic, AES_TABLE_BASE, key, true, cli.seed.wrapping_add(1));
    let thr = {
        let mut b = SimBackend::new(&mut sys, cal);
        calibrate_flush_timing(&mut b, AES_TABLE_BASE, tuning.aes_calibration_rounds)?
    };
    let tpl = collect_template(
        &mut sys,
        attacker,
        &mut victim,
        &thr,
        template_byte,
        template_rounds,
        cli.seed.wrapping_add(5),
    )?;
    let mut body = header.clone().into_bytes();
    let mut s = String::new();
    s.push_str("candidate");
    for line in 0..16 {
        let _ = write!(s, ",line_{line:02}");
    }
    s.push('\n');
    for (g, row) in tpl.iter().enumerate() {
        let _ = write!(s, "{g:x}");
        for hit in row {
            let _ = write!(s, ",{hit}");
        }
        s.push('\n');
    }
    body.extend_from_slice(s.as_bytes());
    let template_path = write_output(&cli.out_dir, "aes_template.csv", &body)?;

    // Attacker and victim counter totals, in the trace format detect reads.
    let samples = vec![
        TraceSample { actor: "aes_attacker".into(), cycle: run.clock, counters: run.attacker },
        TraceSample { actor: "aes_victim".into(), cycle: run.clock, counters: run.victim },
    ];
    let mut body = header.into_bytes();
    let mut csv = Vec::new();
    write_counter_csv(&samples, &mut csv)?;
    body.extend_from_slice(&csv);
    let counters_path = write_output(&cli.out_dir, "aes_counters.csv", &body)?;

    println!(
        "{{\"cmd\":\"aes_attack\",\"technique\":\"{}\",\"multi_line\":{},\"success\":{},\
         \"encryptions\":{},\"probes\":{},\"min_margin\":{:.6},\"recovered\":\"{}\",\
         \"expected\":\"{}\",\"seed\":{},\"report_csv\":\"{}\",\"template_csv\":\"{}\",\
         \"counters_csv\":\"{}\"}}",
        report.technique.as_str(),
        report.multi_line,
        report.success,
        report.encryptions,
        report.probes,
        report.min_margin,
        nibble_hex(&report.recovered),
        nibble_hex(&report.expected),
        cli.seed,
        report_path.display(),
        template_path.display(),
        counters_path.display(),
    );

    if !report.success {
        return Err(Failure {
            code: 3,
            msg: "key recovery did not conclude within the encryption budget".to_string(),
        });
    }
    Ok(())
}

fn cmd_keylog(
    cli: &Cli,
    technique: &str,
    addresses: usize,
    events: usize,
) -> Result<(), Failure> {
    let technique = parse_technique(technique)?;
    if !(1..=3).contains(&addresses) {
        return Err(usage("--addresses must be 1, 2, or 3"));
    }
    if events == 0 {
        return Err(usage("--events must be positive"));
    }
    let tuning = Tuning::default();
    let run = run_keylog(&tuning, technique, addresses, events, cli.seed)?;
    let rep = &run.report;
    let mut body =
        preamble_for(&keylog_harness_config(&tuning, cli.seed), "keylog-harness", "keylog-sim")
            .into_bytes();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "technique,n_addresses,events,matched,false_positives,missed,accuracy,probes,rounds"
    );
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{:.6},{},{}",
        rep.technique.as_str(),
        rep.n_addresses,
        rep.events,
        rep.matched,
        rep.false_positives,
        rep.missed,
        rep.accuracy,
        rep.probes,
        rep.rounds,
    );
    body.extend_from_slice(s.as_bytes());
    let name = format!("keylog_{}.csv", technique.as_str());
    let path = write_output(&cli.out_dir, &name, &body)?;
    println!(
        "{{\"cmd\":\"keylog_sim\",\"technique\":\"{}\",\"addresses\":{},\"events\":{},\
         \"matched\":{},\"false_positives\":{},\"missed\":{},\"accuracy\":{:.6},\
         \"seed\":{},\"csv\":\"{}\"}}",
        rep.technique.as_str(),
        rep.n_addresses,
        rep.events,
        rep.matched,
        rep.false_positives,
        rep.missed,
        rep.accuracy,
        cli.seed,
        path.display(),
    );
    Ok(())
}

fn cmd_slicemap(cli: &Cli, r: &Resolved, count: usize) -> Result<(), Failure> {
    if count == 0 {
        return Err(usage("--count must be positive"));
    }
    let run = run_slicemap(&r.mem, &Tuning::default(), count, cli.seed)?;
    let mut body = preamble(r, "slice-map").into_bytes();
    let mut s = String::from("addr,slice,votes,reps\n");
    for e in &run.entries {
        let _ = writeln!(s, "{:#x},{},{},{}", e.addr, e.slice, e.votes, e.reps);
    }
    body.extend_from_slice(s.as_bytes());
    let path = write_output(&cli.out_dir, "slice_map.csv", &body)?;
    println!(
        "{{\"cmd\":\"slice_map\",\"count\":{},\"mismatches\":{},\"n_slices\":{},\
         \"seed\":{},\"csv\":\"{}\"}}",
        run.entries.len(),
        run.mismatches,
        r.mem.n_slices,
        cli.seed,
        path.display(),
    );
    Ok(())
}
