//! Command-line front end: calibrate a camera site, run the engine over a
//! detection stream, synthesize test scenes, evaluate results and dispatch
//! queued tickets.
//!
//! Exit codes: 0 success, 1 unmet threshold or delivery failure, 2 input
//! error.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use sentinel_core::config::{load_scenario, save_calibration, EngineConfig};
use sentinel_core::enforcement::sms::{GatewayConfig, SmsClient, SmsRequest};
use sentinel_core::enforcement::{
    latest_tickets, load_registry_entries, load_ticket_log, render_sms, DeliveryState,
    TicketLogWriter, ViolationTicket,
};
use sentinel_core::engine::{write_annotations, write_reports, Engine};
use sentinel_core::geometry::{Point2, Quad};
use sentinel_core::metrics::{
    cer_batch, evaluate_speeds, join_detection_frames, map50, read_cer_pairs, read_ground_truth,
    read_predictions, SpeedTruth,
};
use sentinel_core::scenario::generate_scenario;
use sentinel_core::speed::Calibration;
use sentinel_core::stream::{
    read_gun_file, read_truth_file, sniff_truth_kind, write_stream, write_truth_file, StreamReader,
    TruthKind,
};

#[derive(Parser)]
#[command(
    name = "sentinel",
    version,
    about = "Traffic-camera analytics: tracking, speed estimation, plate identity and ticketing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and store a road-plane calibration for one camera site
    Calibrate(CalibrateArgs),
    /// Process a detection stream into track reports, annotations and tickets
    Run(RunArgs),
    /// Generate a synthetic detection stream with known vehicle speeds
    Simulate(SimulateArgs),
    /// Compute evaluation metrics from engine outputs and ground truth
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Ticket queue operations
    #[command(subcommand)]
    Ticket(TicketCommand),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Source quad corners in pixels: ax,ay,bx,by,cx,cy,dx,dy
    /// (a top-left, b top-right, c bottom-right, d bottom-left; a→d runs
    /// along the travel direction)
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    quad: Vec<f64>,
    /// Target rectangle width, meters
    #[arg(long)]
    target_width: f64,
    /// Target rectangle length along the travel direction, meters
    #[arg(long)]
    target_length: f64,
    #[arg(long)]
    fps: f64,
    /// Posted speed limit, km/h
    #[arg(long)]
    limit: f64,
    #[arg(long, default_value = "cam-01")]
    camera_id: String,
    #[arg(long, default_value = "unspecified")]
    location: String,
    /// Output calibration file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Detection stream (line-delimited JSON)
    #[arg(long)]
    stream: PathBuf,
    /// Engine config file
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario spec file (with inline calibration)
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for stream.jsonl, truth.csv and calibration.json
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Compare assigned track speeds against a truth table or gun records
    Speeds(EvalSpeedsArgs),
    /// Average precision at IoU 0.5 over ground truth and predictions
    Map50(EvalMapArgs),
    /// Mean character-error-rate over predicted/truth text pairs
    Cer(EvalCerArgs),
}

#[derive(Args)]
struct EvalSpeedsArgs {
    /// Track reports from `sentinel run`
    #[arg(long)]
    reports: PathBuf,
    /// Truth file: synthetic truth table or gun-record export (sniffed
    /// from the header)
    #[arg(long)]
    truth: PathBuf,
    /// Error margin counted as "within", km/h
    #[arg(long, default_value_t = 10.0)]
    margin: f64,
    /// Fail (exit 1) when the within-margin fraction is below this
    #[arg(long)]
    require_within: Option<f64>,
    /// Fail (exit 1) when the mean absolute error exceeds this, km/h
    #[arg(long)]
    require_mae: Option<f64>,
    /// Write the full report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalMapArgs {
    /// Ground-truth boxes per image (line-delimited JSON)
    #[arg(long)]
    ground_truth: PathBuf,
    /// Scored predictions per image (line-delimited JSON)
    #[arg(long)]
    predictions: PathBuf,
    /// Fail (exit 1) when average precision is below this
    #[arg(long)]
    require_min: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCerArgs {
    /// CSV with header `predicted,truth`
    #[arg(long)]
    pairs: PathBuf,
    /// Fail (exit 1) when the mean CER exceeds this
    #[arg(long)]
    require_max: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TicketCommand {
    /// Send every pending ticket in the log through the SMS gateway
    Send(TicketSendArgs),
}

#[derive(Args)]
struct TicketSendArgs {
    /// Ticket log produced by `sentinel run`
    #[arg(long)]
    log: PathBuf,
    /// Registry for resolving owners missing from older records
    #[arg(long)]
    registry: Option<PathBuf>,
}

/// Failures that map to exit code 1; everything else exits 2.
#[derive(Debug)]
enum Gate {
    Unmet(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Run(args) => cmd_run(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Eval(EvalCommand::Speeds(args)) => cmd_eval_speeds(args),
        Command::Eval(EvalCommand::Map50(args)) => cmd_eval_map50(args),
        Command::Eval(EvalCommand::Cer(args)) => cmd_eval_cer(args),
        Command::Ticket(TicketCommand::Send(args)) => cmd_ticket_send(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => match err.downcast_ref::<Gate>() {
            Some(Gate::Unmet(message)) => {
                eprintln!("sentinel: {message}");
                ExitCode::from(1)
            }
            None => {
                eprintln!("sentinel: error: {err:#}");
                ExitCode::from(2)
            }
        },
    }
}

impl std::fmt::Display for Gate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let Gate::Unmet(m) = self;
        write!(f, "{m}")
    }
}

impl std::error::Error for Gate {}

fn cmd_calibrate(args: CalibrateArgs) -> anyhow::Result<()> {
    let q = &args.quad;
    if q.len() != 8 {
        return Err(anyhow!(
            "--quad needs 8 values (ax,ay,bx,by,cx,cy,dx,dy), got {}",
            q.len()
        ));
    }
    let quad = Quad::new(
        Point2::new(q[0], q[1]),
        Point2::new(q[2], q[3]),
        Point2::new(q[4], q[5]),
        Point2::new(q[6], q[7]),
    )
    .context("invalid source quad")?;
    let cal = Calibration::solve(
        args.camera_id,
        args.location,
        args.fps,
        args.limit,
        quad,
        args.target_width,
        args.target_length,
    )
    .context("calibration failed")?;
    save_calibration(&args.out, &cal)?;

    let residuals = cal.corner_residuals().context("residual check failed")?;
    println!("calibration written to {}", args.out.display());
    for (label, r) in ["a", "b", "c", "d"].iter().zip(residuals) {
        println!("  corner {label}: residual {r:.3e} m");
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let config = EngineConfig::load(&args.config)?;
    let settings = config.build_settings()?;
    let registry = config.load_registry()?;
    let sms = match config.resolve_gateway()? {
        Some(gateway) => Some(SmsClient::new(gateway)?),
        None => None,
    };

    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;

    let frames = StreamReader::open(&args.stream)
        .with_context(|| format!("opening {}", args.stream.display()))?;
    let output = Engine::run(settings, registry, sms, frames)?;

    let reports_path = config.output_dir.join("reports.jsonl");
    let annotations_path = config.output_dir.join("annotations.jsonl");
    let tickets_path = config.output_dir.join("tickets.jsonl");
    write_reports(&reports_path, &output.reports)?;
    write_annotations(&annotations_path, &output.annotations)?;
    // fresh log per run; `ticket send` appends state updates to it
    std::fs::write(&tickets_path, b"")?;
    let log = TicketLogWriter::open(&tickets_path)?;
    for t in &output.tickets {
        log.append(t)?;
    }

    let violations = output.reports.iter().filter(|r| r.violation).count();
    let (mut sent, mut failed, mut suppressed, mut pending) = (0, 0, 0, 0);
    for t in &output.tickets {
        match t.delivery {
            DeliveryState::Sent { .. } => sent += 1,
            DeliveryState::Failed { .. } => failed += 1,
            DeliveryState::Suppressed { .. } => suppressed += 1,
            DeliveryState::Pending => pending += 1,
        }
    }
    println!(
        "processed {} frames: {} tracks, {} violations",
        output.frames_processed,
        output.reports.len(),
        violations
    );
    println!("tickets: {sent} sent, {pending} pending, {suppressed} suppressed, {failed} failed");
    println!("outputs in {}", config.output_dir.display());

    if failed > 0 {
        return Err(anyhow!(Gate::Unmet(format!(
            "{failed} ticket deliveries failed"
        ))));
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let spec = load_scenario(&args.spec)?;
    let scenario = generate_scenario(&spec, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let stream_path = args.out_dir.join("stream.jsonl");
    let truth_path = args.out_dir.join("truth.csv");
    write_stream(&stream_path, &scenario.frames)?;
    write_truth_file(&truth_path, &scenario.truth)?;
    // the scene's calibration, ready to be referenced by an engine config
    save_calibration(args.out_dir.join("calibration.json"), &spec.calibration)?;
    println!(
        "wrote {} frames, {} vehicles (seed {})",
        scenario.frames.len(),
        scenario.truth.len(),
        args.seed
    );
    println!("outputs in {}", args.out_dir.display());
    Ok(())
}

fn write_json_report<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_eval_speeds(args: EvalSpeedsArgs) -> anyhow::Result<()> {
    let reports = sentinel_core::engine::read_reports(&args.reports)?;
    let truth = match sniff_truth_kind(&args.truth)? {
        TruthKind::Synthetic => SpeedTruth::Synthetic(read_truth_file(&args.truth)?),
        TruthKind::Gun => SpeedTruth::Gun(read_gun_file(&args.truth)?),
    };
    let report = evaluate_speeds(&reports, &truth, args.margin)?;

    println!(
        "matched {} truth records: MAE {:.2} km/h, max |err| {:.2} km/h, {:.1}% within ±{:.0} km/h",
        report.matched,
        report.mae_kmh,
        report.max_abs_error_kmh,
        report.fraction_within_margin * 100.0,
        report.margin_kmh
    );
    println!(
        "  {:<14} {:>8} {:>10} {:>8}  within",
        "truth", "km/h", "estimated", "|err|"
    );
    for row in &report.rows {
        println!(
            "  {:<14} {:>8.1} {:>10.1} {:>8.1}  {}",
            row.truth_label,
            row.truth_speed_kmh,
            row.estimated_kmh,
            row.abs_error_kmh,
            if row.within_margin { "yes" } else { "NO" }
        );
    }
    for u in &report.unmatched {
        println!("  unmatched: {u}");
    }
    for a in &report.ambiguous {
        println!("  ambiguous: {a}");
    }
    if let Some(path) = &args.out {
        write_json_report(path, &report)?;
    }

    if let Some(required) = args.require_within {
        if report.fraction_within_margin < required {
            return Err(anyhow!(Gate::Unmet(format!(
                "within-margin fraction {:.3} below required {required:.3}",
                report.fraction_within_margin
            ))));
        }
    }
    if let Some(max_mae) = args.require_mae {
        if report.mae_kmh > max_mae {
            return Err(anyhow!(Gate::Unmet(format!(
                "MAE {:.2} km/h above required {max_mae:.2}",
                report.mae_kmh
            ))));
        }
    }
    Ok(())
}

fn cmd_eval_map50(args: EvalMapArgs) -> anyhow::Result<()> {
    let gt = read_ground_truth(&args.ground_truth)?;
    let preds = read_predictions(&args.predictions)?;
    let frames = join_detection_frames(&gt, &preds);
    let ap = map50(&frames)?;
    println!("mAP50 over {} images: {ap:.4}", frames.len());
    if let Some(path) = &args.out {
        write_json_report(
            path,
            &serde_json::json!({ "map50": ap, "images": frames.len() }),
        )?;
    }
    if let Some(min) = args.require_min {
        if ap < min {
            return Err(anyhow!(Gate::Unmet(format!(
                "mAP50 {ap:.4} below required {min:.4}"
            ))));
        }
    }
    Ok(())
}

fn cmd_eval_cer(args: EvalCerArgs) -> anyhow::Result<()> {
    let pairs = read_cer_pairs(&args.pairs)?;
    let mean = cer_batch(&pairs)?;
    println!("mean CER over {} pairs: {mean:.4}", pairs.len());
    if let Some(path) = &args.out {
        write_json_report(
            path,
            &serde_json::json!({ "mean_cer": mean, "pairs": pairs.len() }),
        )?;
    }
    if let Some(max) = args.require_max {
        if mean > max {
            return Err(anyhow!(Gate::Unmet(format!(
                "mean CER {mean:.4} above required {max:.4}"
            ))));
        }
    }
    Ok(())
}

fn cmd_ticket_send(args: TicketSendArgs) -> anyhow::Result<()> {
    let gateway = GatewayConfig::from_env()?
        .ok_or_else(|| anyhow!("SENTINEL_SMS_URL is not set; no gateway to send through"))?;
    let client = SmsClient::new(gateway)?;

    let registry: Option<std::collections::HashMap<String, _>> = match &args.registry {
        Some(path) => Some(
            load_registry_entries(path)?
                .into_iter()
                .map(|e| (e.plate.trim().to_ascii_uppercase(), e))
                .collect(),
        ),
        None => None,
    };

    let log_records = load_ticket_log(&args.log)?;
    let current = latest_tickets(&log_records);
    let writer = TicketLogWriter::open(&args.log)?;

    let (mut sent, mut failed, mut skipped) = (0, 0, 0);
    let mut seen: HashSet<String> = HashSet::new();
    for ticket in current {
        if !seen.insert(ticket.ticket_id.clone()) {
            continue;
        }
        if ticket.delivery != DeliveryState::Pending {
            continue;
        }
        let mut ticket: ViolationTicket = ticket.clone();
        if ticket.owner.is_none() {
            if let (Some(reg), plate) = (&registry, ticket.plate.clone()) {
                ticket.owner = reg.get(&plate).cloned();
            }
        }
        let Some(owner) = ticket.owner.clone() else {
            skipped += 1;
            println!(
                "ticket {}: still pending, no owner on record",
                ticket.ticket_id
            );
            continue;
        };
        let request = SmsRequest {
            to: owner.phone.clone(),
            message: render_sms(&ticket),
            idempotency_key: ticket.ticket_id.clone(),
        };
        ticket.delivery = match client.send(&request) {
            Ok(result) => {
                sent += 1;
                println!("ticket {}: sent ({})", ticket.ticket_id, result.message_id);
                DeliveryState::Sent {
                    message_id: result.message_id,
                }
            }
            Err(e) => {
                failed += 1;
                println!("ticket {}: failed ({e})", ticket.ticket_id);
                DeliveryState::Failed {
                    reason: e.to_string(),
                }
            }
        };
        writer.append(&ticket)?;
    }
    println!("{sent} sent, {failed} failed, {skipped} skipped");
    if failed > 0 {
        return Err(anyhow!(Gate::Unmet(format!(
            "{failed} ticket deliveries failed"
        ))));
    }
    Ok(())
}
