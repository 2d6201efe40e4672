use std::net::TcpListener;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rapid_core::cloud::{
    serve_tcp, CloudClient, InProcessTransport, LatencySource, MockCloud, ObservationBlob,
    ServerOptions, TcpTransport,
};
use rapid_core::config::{preset_names, RunConfig};
use rapid_core::realtime::{run_realtime, RealtimeOptions};
use rapid_core::report::{
    compare_runs, emit_report, render_structured, render_table, write_trace, EpisodeReport,
    LatencySummary, ReportFormat,
};
use rapid_core::scenario::{generate_scenario, Task};
use rapid_core::sim::{run_episode, run_episode_with, run_states_with, EpisodeMeta, PolicyKind};
use rapid_core::trajectory::read_trajectory;

#[derive(Parser)]
#[command(name = "rapid", version, about = "Edge-cloud action chunk dispatcher and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy on a scenario.
    Run(RunArgs),
    /// Run all four policies on the same scenario and compare them.
    Bench(BenchArgs),
    /// Grid over the two trigger thresholds.
    Sweep(SweepArgs),
    /// Feed a recorded trajectory (JSON lines) through a policy.
    Replay(ReplayArgs),
    /// Serve the mock cloud policy over TCP.
    Serve(ServeArgs),
    /// Send requests to a running server and print round-trip times.
    Probe(ProbeArgs),
    /// Run the sensor and control loops on two threads in wall-clock time.
    Live(LiveArgs),
    /// Print a bundled preset as TOML.
    Preset { name: String },
}

#[derive(Args, Clone)]
struct Common {
    /// Preset name (sim, real, noise) or path to a TOML config.
    #[arg(short, long, default_value = "real")]
    config: String,
    #[arg(long)]
    theta_comp: Option<f64>,
    #[arg(long)]
    theta_red: Option<f64>,
    /// Fixed normalising speed; skips the start-up calibration.
    #[arg(long)]
    vmax: Option<f64>,
    /// Cooldown in control ticks.
    #[arg(long)]
    cooldown: Option<u32>,
    #[arg(long)]
    window_acc: Option<usize>,
    #[arg(long)]
    window_tau: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    duration: Option<f64>,
    /// Entropy threshold for the vision baseline, in bits.
    #[arg(long)]
    threshold: Option<f64>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::resolve(&self.config)
            .with_context(|| format!("loading config {:?}", self.config))?;
        let t = &mut cfg.trigger;
        if let Some(v) = self.theta_comp {
            t.theta_comp = v;
        }
        if let Some(v) = self.theta_red {
            t.theta_red = v;
        }
        if self.vmax.is_some() {
            t.v_max = self.vmax;
        }
        if let Some(v) = self.cooldown {
            t.cooldown_steps = v;
        }
        if let Some(v) = self.window_acc {
            t.w_a_len = v;
        }
        if let Some(v) = self.window_tau {
            t.w_tau_len = v;
        }
        if let Some(v) = self.eps {
            t.eps = v;
        }
        let s = &mut cfg.scenario;
        if let Some(v) = self.noise {
            s.noise_level = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.duration {
            s.duration_s = v;
        }
        if let Some(name) = &self.task {
            s.task = Some(Task::parse(name)?);
            s.segments = None;
        }
        if let Some(v) = self.threshold {
            cfg.vision_threshold_bits = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// rapid, edge_only, cloud_only or vision_entropy.
    #[arg(short, long, default_value = "rapid")]
    policy: String,
    /// Report file; the extension picks JSON or TOML.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Per-tick trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Send cloud requests to a server at this address instead of in-process.
    #[arg(long)]
    remote: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Write the reports and the comparison as JSON.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.65,0.7,0.8")]
    comp: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.3,0.35,0.4,0.5")]
    red: Vec<f64>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trajectory file, one JSON object per line.
    trajectory: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(short, long, default_value = "rapid")]
    policy: String,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(short, long, default_value = "real")]
    config: String,
    /// Overrides the configured address.
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    max_connections: Option<usize>,
    #[arg(long, default_value_t = 250)]
    idle_timeout_ms: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    #[arg(short = 'n', long, default_value_t = 10)]
    count: u64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(short, long, default_value = "real")]
    config: String,
}

#[derive(Args)]
struct LiveArgs {
    #[command(flatten)]
    common: Common,
    /// Sleep to hold the nominal sensor and control rates.
    #[arg(long)]
    pace: bool,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => sweep(a),
        Command::Replay(a) => replay(a),
        Command::Serve(a) => serve(a),
        Command::Probe(a) => probe(a),
        Command::Live(a) => live(a),
        Command::Preset { name } => {
            if !preset_names().any(|n| n == name) {
                bail!("unknown preset {name:?}; known: {}", preset_names().collect::<Vec<_>>().join(", "));
            }
            print!("{}", RunConfig::preset(&name)?.to_toml()?);
            Ok(())
        }
    }
}

fn finish(report: &EpisodeReport, out: Option<&PathBuf>, trace: Option<&PathBuf>) -> anyhow::Result<()> {
    print!("{}", render_table(std::slice::from_ref(report)));
    println!(
        "dispatches {} ({} depletion refills), trigger-high ticks {}, offloads {}, stalls {}, timeouts {}",
        report.dispatch_count,
        report.depletion_refills,
        report.trigger_count,
        report.offloads,
        report.stall_count,
        report.timeouts
    );
    if let Some(path) = out {
        emit_report(report, ReportFormat::from_path(path)?, path)?;
        eprintln!("report written to {}", path.display());
    }
    if let Some(path) = trace {
        write_trace(report, path)?;
        eprintln!("trace written to {}", path.display());
    }
    Ok(())
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let cfg = a.common.load()?;
    let policy = PolicyKind::parse(&a.policy, cfg.vision_threshold_bits)?;
    let scenario = cfg.scenario.build()?;
    let mut ecfg = cfg.episode_config();
    ecfg.trace = a.trace.is_some();
    let report = match &a.remote {
        Some(addr) => {
            let transport = TcpTransport::connect(addr, Duration::from_millis(ecfg.timeout_ms as u64))
                .with_context(|| format!("connecting to {addr}"))?;
            run_episode_with(&scenario, policy, &ecfg, transport)?.report
        }
        None => run_episode(&scenario, policy, &ecfg)?,
    };
    finish(&report, a.out.as_ref(), a.trace.as_ref())
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let cfg = a.common.load()?;
    let scenario = cfg.scenario.build()?;
    let ecfg = cfg.episode_config();
    let policies = [
        PolicyKind::EdgeOnly,
        PolicyKind::CloudOnly,
        PolicyKind::VisionEntropy { threshold_bits: cfg.vision_threshold_bits },
        PolicyKind::Rapid,
    ];
    let reports = policies
        .into_iter()
        .map(|p| run_episode(&scenario, p, &ecfg))
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", render_table(&reports));
    let cmp = compare_runs(&reports)?;
    for p in &cmp.pairs {
        println!("{:>15} / {:<15} {:>6.3}x  ({:+.1} ms)", p.baseline, p.candidate, p.speedup, p.delta_ms);
    }
    println!("best: {}", cmp.best);
    for (policy, reference) in &cfg.reference.totals {
        if let Some(r) = reports.iter().find(|r| &r.policy == policy) {
            println!(
                "{policy:>15}: {:.1} ms vs reference {reference:.1} ms ({:+.1}%)",
                r.total_latency_ms.mean,
                100.0 * (r.total_latency_ms.mean / reference - 1.0)
            );
        }
    }
    if let Some(path) = a.out {
        let doc = serde_json::json!({ "reports": reports, "comparison": cmp });
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let base = a.common.load()?;
    let scenario = base.scenario.build()?;
    println!(
        "{:>10} {:>10} {:>10} {:>9} {:>9} {:>12}",
        "theta_comp", "theta_red", "dispatch", "refill", "high", "total_ms"
    );
    for &comp in &a.comp {
        for &red in &a.red {
            let mut cfg = base.clone();
            cfg.trigger.theta_comp = comp;
            cfg.trigger.theta_red = red;
            cfg.validate()?;
            let r = run_episode(&scenario, PolicyKind::Rapid, &cfg.episode_config())?;
            println!(
                "{comp:>10.3} {red:>10.3} {:>10} {:>9} {:>9} {:>12.1}",
                r.dispatch_count, r.depletion_refills, r.trigger_count, r.total_latency_ms.mean
            );
        }
    }
    Ok(())
}

fn replay(a: ReplayArgs) -> anyhow::Result<()> {
    let cfg = a.common.load()?;
    let states = read_trajectory(&a.trajectory)?;
    let Some(first) = states.first() else {
        bail!("{} holds no samples", a.trajectory.display());
    };
    let n = first.state.n_joints();
    let meta = EpisodeMeta {
        id: a
            .trajectory
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "replay".into()),
        seed: cfg.scenario.seed,
        noise_level: cfg.scenario.noise_level,
        n_joints: n,
        sensor_hz: cfg.scenario.sensor_hz,
        control_hz: cfg.scenario.control_hz,
    };
    let mut ecfg = cfg.episode_config();
    ecfg.cloud.n_joints = n;
    ecfg.trace = a.trace.is_some();
    let policy = PolicyKind::parse(&a.policy, cfg.vision_threshold_bits)?;
    let transport = InProcessTransport::new(MockCloud::new(ecfg.cloud.clone())?);
    let report = run_states_with(&states, &meta, policy, &ecfg, transport)?.report;
    finish(&report, a.out.as_ref(), a.trace.as_ref())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(&a.config)?;
    let addr = a.addr.unwrap_or(cfg.server.addr.clone());
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
    let mut cloud_cfg = cfg.cloud.clone();
    cloud_cfg.n_joints = cfg.scenario.n_joints;
    let cloud = MockCloud::new(cloud_cfg)?;
    eprintln!("serving on {}", listener.local_addr()?);
    let opts = ServerOptions {
        idle_timeout: Duration::from_millis(a.idle_timeout_ms),
        max_connections: a.max_connections,
    };
    serve_tcp(&listener, &cloud, opts)?;
    Ok(())
}

fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(&a.config)?;
    let transport = TcpTransport::connect(&a.addr, Duration::from_millis(cfg.timeout_ms as u64))
        .with_context(|| format!("connecting to {}", a.addr))?;
    let mut client = CloudClient::new(transport, LatencySource::WallClock).with_timeout_ms(cfg.timeout_ms);
    let mut samples = Vec::new();
    for step in 0..a.count {
        let obs = ObservationBlob::capture(cfg.cloud.seed, step, cfg.cloud.observation_bytes, a.noise)?;
        let reply = client.request_chunk(&obs)?;
        println!(
            "step {step:>4}: {:>8.3} ms, {} rows, {} attempt(s)",
            reply.latency_ms,
            reply.chunk.horizon(),
            reply.attempts
        );
        samples.push(reply.latency_ms);
    }
    let s = LatencySummary::from_samples(&samples);
    println!("mean {:.3} ms  p50 {:.3} ms  p99 {:.3} ms", s.mean, s.p50, s.p99);
    Ok(())
}

fn live(a: LiveArgs) -> anyhow::Result<()> {
    let cfg = a.common.load()?;
    let scenario = cfg.scenario.build()?;
    let states: Vec<_> = generate_scenario(&scenario)?.into_iter().map(|s| s.state).collect();
    let opts = RealtimeOptions {
        sensor_hz: scenario.sensor_hz,
        control_hz: scenario.control_hz,
        horizon: cfg.cloud.horizon as u32,
        pace: a.pace,
    };
    let summary = run_realtime(states, &cfg.trigger, opts)?;
    print!("{}", render_structured(&summary, ReportFormat::Toml)?);
    Ok(())
}
