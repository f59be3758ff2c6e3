use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use teleop_core::depthcodec::{decode_bytes, encode_batch, encode_depth, synth_scene, DepthFrame, SceneParams};
use teleop_core::netsim::{rtt_monte_carlo, ChannelProfile, LinkParams};
use teleop_core::par::Execution;
use teleop_core::session::{metrics, replay, run_session, Record, SessionConfig, SessionError, SessionLog};
use teleop_core::ui_bridge::{serve, BridgeOptions};

const EXIT_CONFIG: u8 = 2;
const EXIT_FAULT: u8 = 3;

#[derive(Parser)]
#[command(name = "teleop", version, about = "Leader-follower teleoperation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulated session and print its metrics.
    Run(RunArgs),
    /// Re-run a logged session and compare the logs byte for byte.
    Replay { log: PathBuf },
    /// Print the metrics of a session log.
    Metrics { log: PathBuf },
    /// Dump the haptic event stream of a session log as JSON lines.
    Haptics { log: PathBuf },
    /// Run a live session driven by a WebSocket operator console.
    Serve(ServeArgs),
    /// Depth frame tools.
    #[command(subcommand)]
    Codec(CodecCmd),
    /// Compression ratio and throughput on synthetic tabletop frames.
    CodecBench(BenchArgs),
    /// Round-trip time statistics of the channel profiles.
    ChannelBench(ChannelArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Session config (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set channel.profile="5g-nsa"`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds; 0 uses the script length.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the session log (JSON lines) here.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "127.0.0.1:8765")]
    bind: String,
    /// Render-state publish rate, at most 15 Hz.
    #[arg(long, default_value_t = 15.0)]
    publish_hz: f64,
    /// Simulated seconds per wall second.
    #[arg(long, default_value_t = 1.0)]
    pace: f64,
    /// One point cloud every this many publishes; 0 disables clouds.
    #[arg(long, default_value_t = 5)]
    cloud_every: u32,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SceneArgs {
    #[arg(long, default_value_t = 848)]
    width: u16,
    #[arg(long, default_value_t = 480)]
    height: u16,
    /// Table depth at the image center, meters.
    #[arg(long, default_value_t = 1.0)]
    plane_depth: f64,
    #[arg(long, default_value_t = 4)]
    boxes: usize,
    /// Gaussian depth noise in depth units (mm).
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SceneArgs {
    fn params(&self) -> SceneParams {
        SceneParams {
            width: self.width,
            height: self.height,
            plane_depth: self.plane_depth,
            boxes: self.boxes,
            noise_sigma: self.noise,
            seed: self.seed,
            ..SceneParams::default()
        }
    }
}

#[derive(Subcommand)]
enum CodecCmd {
    /// Compress a 16-bit PGM depth image.
    Encode {
        input: PathBuf,
        output: PathBuf,
        /// Meters per depth unit.
        #[arg(long, default_value_t = 0.001)]
        depth_scale: f64,
    },
    /// Decompress to a 16-bit PGM depth image.
    Decode { input: PathBuf, output: PathBuf },
    /// Render a synthetic tabletop depth image as 16-bit PGM.
    Synth {
        output: PathBuf,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Same as `codec-bench`.
    Bench(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    /// Use one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ChannelArgs {
    /// Profiles to measure.
    #[arg(long = "profile", default_values_t = ["wifi".to_string(), "5g-nsa".to_string()])]
    profiles: Vec<String>,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value_t = 500)]
    probes: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            report(&e);
            let config = e.chain().any(|c| c.downcast_ref::<SessionError>().is_some_and(SessionError::is_config));
            ExitCode::from(if config { EXIT_CONFIG } else { 1 })
        }
    }
}

/// Prints the error chain, skipping causes already spelled out by their parent.
fn report(e: &anyhow::Error) {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    eprintln!("error: {msg}");
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Replay { log } => cmd_replay(&log),
        Cmd::Metrics { log } => {
            let log = SessionLog::load(&log)?;
            print_json(&metrics(&log))?;
            Ok(fault_code(&log))
        }
        Cmd::Haptics { log } => {
            let log = SessionLog::load(&log)?;
            let mut out = std::io::stdout().lock();
            for r in &log.records {
                if let Record::Haptic(ev) = r {
                    writeln!(out, "{}", serde_json::to_string(ev)?)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Codec(c) => cmd_codec(c),
        Cmd::CodecBench(a) => cmd_codec_bench(&a),
        Cmd::ChannelBench(a) => cmd_channel_bench(&a),
    }
}

fn fault_code(log: &SessionLog) -> ExitCode {
    if log.aborted() {
        ExitCode::from(EXIT_FAULT)
    } else {
        ExitCode::SUCCESS
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn load_config(a: &ConfigArgs) -> Result<SessionConfig> {
    let mut cfg = match &a.config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    if !a.overrides.is_empty() {
        let mut table: toml::Table = toml::from_str(&cfg.to_toml_string()).context("re-reading config")?;
        for o in &a.overrides {
            apply_override(&mut table, o)?;
        }
        cfg = SessionConfig::from_toml_str(&toml::to_string(&table)?)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.duration {
        cfg.duration = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Sets a dotted key. The value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, arg: &str) -> Result<()> {
    let Some((key, raw)) = arg.split_once('=') else {
        return Err(SessionError::Config(format!("override `{arg}` is not KEY=VALUE")).into());
    };
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| SessionError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let start = Instant::now();
    let log = run_session(cfg)?;
    let wall = start.elapsed().as_secs_f64();
    if let Some(out) = &a.out {
        log.save(out).with_context(|| format!("writing {}", out.display()))?;
    }
    let m = metrics(&log);
    print_json(&json!({ "wall_s": wall, "metrics": m }))?;
    if log.aborted() {
        eprintln!("session aborted by a controller fault");
    }
    Ok(fault_code(&log))
}

fn cmd_replay(path: &Path) -> Result<ExitCode> {
    let log = SessionLog::load(path)?;
    match replay(&log)? {
        None => {
            println!("identical: {} records", log.records.len());
            Ok(ExitCode::SUCCESS)
        }
        Some(line) => {
            println!("logs differ at line {line}");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_serve(a: ServeArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    if cfg.duration <= 0.0 {
        cfg.duration = 3600.0;
    }
    let listener = TcpListener::bind(&a.bind).with_context(|| format!("binding {}", a.bind))?;
    eprintln!("serving ws://{} for {} s", listener.local_addr()?, cfg.duration);
    let opts = BridgeOptions {
        publish_hz: a.publish_hz,
        pace: a.pace,
        cloud_every: a.cloud_every,
    };
    let log = serve(cfg, listener, opts, Arc::new(AtomicBool::new(false)))?;
    if let Some(out) = &a.out {
        log.save(out)?;
    }
    print_json(&metrics(&log))?;
    Ok(fault_code(&log))
}

fn cmd_codec(c: CodecCmd) -> Result<ExitCode> {
    match c {
        CodecCmd::Encode {
            input,
            output,
            depth_scale,
        } => {
            let frame = DepthFrame::read_pgm(BufReader::new(File::open(&input)?), depth_scale)
                .with_context(|| format!("reading {}", input.display()))?;
            let coded = encode_depth(&frame, 0, 0)?;
            std::fs::write(&output, coded.to_bytes())?;
            print_json(&json!({
                "raw_bytes": frame.raw_bytes(),
                "coded_bytes": coded.len(),
                "ratio": coded.ratio(),
            }))?;
        }
        CodecCmd::Decode { input, output } => {
            let bytes = std::fs::read(&input)?;
            let frame = decode_bytes(&bytes).with_context(|| format!("decoding {}", input.display()))?;
            let mut w = BufWriter::new(File::create(&output)?);
            frame.write_pgm(&mut w)?;
            w.flush()?;
        }
        CodecCmd::Synth { output, scene } => {
            let frame = synth_scene(&scene.params());
            let mut w = BufWriter::new(File::create(&output)?);
            frame.write_pgm(&mut w)?;
            w.flush()?;
        }
        CodecCmd::Bench(a) => return cmd_codec_bench(&a),
    }
    Ok(ExitCode::SUCCESS)
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn cmd_codec_bench(a: &BenchArgs) -> Result<ExitCode> {
    if a.frames == 0 {
        bail!("need at least one frame");
    }
    let frames: Vec<DepthFrame> = (0..a.frames as u64)
        .map(|i| {
            let mut p = a.scene.params();
            p.seed = a.scene.seed.wrapping_add(i);
            synth_scene(&p)
        })
        .collect();
    let raw: usize = frames.iter().map(DepthFrame::raw_bytes).sum();

    let t0 = Instant::now();
    let coded = encode_batch(&frames, exec(a.sequential))?;
    let enc = t0.elapsed().as_secs_f64();
    let bytes: Vec<Vec<u8>> = coded.iter().map(|c| c.to_bytes()).collect();
    let t1 = Instant::now();
    for (b, f) in bytes.iter().zip(&frames) {
        if decode_bytes(b)? != *f {
            bail!("round trip mismatch");
        }
    }
    let dec = t1.elapsed().as_secs_f64();
    let coded_total: usize = bytes.iter().map(Vec::len).sum();
    let n = frames.len() as f64;
    print_json(&json!({
        "frames": frames.len(),
        "width": a.scene.width,
        "height": a.scene.height,
        "noise_sigma": a.scene.noise,
        "ratio": raw as f64 / coded_total as f64,
        "encode_fps": n / enc,
        "decode_fps": n / dec,
        "roundtrip_fps": n / (enc + dec),
        "mode": if a.sequential { "sequential" } else { "parallel" },
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_channel_bench(a: &ChannelArgs) -> Result<ExitCode> {
    let mut rows = Vec::new();
    for name in &a.profiles {
        let profile = ChannelProfile::preset(name).map_err(|e| SessionError::Config(e.to_string()))?;
        let params = LinkParams::from_profile(&profile)?;
        let s = rtt_monte_carlo(&params, a.runs, a.probes, 20_000, a.seed, exec(a.sequential))?;
        rows.push(json!({
            "profile": name,
            "target_ms": profile.rtt_ms,
            "measured": s,
        }));
    }
    print_json(&rows)?;
    Ok(ExitCode::SUCCESS)
}
