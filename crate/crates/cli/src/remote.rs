//! `serve`, and the subcommands that talk to a running service.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Subcommand};
use culicid_client::{Client, Decision, DecisionRequest, IngestMetadata};
use culicid_core::bundle::ClassifyMode;
use culicid_service::ServiceConfig;
use serde_json::json;

use crate::fail::{bad_input, ExitCode, Failure, Outcome, INTERNAL};

/// Images per evaluation set.
pub const SET_SIZE: usize = 3;

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model bundle directory (overrides the config).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    /// Store directory (overrides the config).
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<ClassifyMode>,
}

pub fn run_serve(a: &ServeArgs) -> Outcome {
    let mut cfg = ServiceConfig::load(a.config.as_deref()).bad_input()?;
    if let Some(m) = &a.model {
        cfg.model = Some(m.clone());
    }
    if let Some(b) = &a.bind {
        cfg.bind = b.clone();
    }
    if let Some(s) = &a.store {
        cfg.store = s.clone();
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    cfg.validate().bad_input()?;
    runtime()?.block_on(culicid_service::serve(cfg, |addr| {
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    }))
    .map_err(|e| {
        let code = match e {
            culicid_service::Error::Config(_) | culicid_service::Error::Model(_) | culicid_service::Error::Bind { .. } => {
                crate::fail::BAD_INPUT
            }
            _ => INTERNAL,
        };
        Failure { code, error: e.into() }
    })
}

fn runtime() -> Outcome<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_current_thread().enable_all().build().internal()
}

#[derive(Debug, Clone, Args)]
pub struct ServerArgs {
    /// Service base URL.
    #[arg(long, env = "CULICID_URL", default_value = "http://127.0.0.1:8642")]
    pub server: String,
    /// Bearer token.
    #[arg(long, env = "CULICID_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
}

impl ServerArgs {
    fn client(&self) -> Client {
        let c = Client::new(&self.server);
        match &self.token {
            Some(t) => c.with_token(t),
            None => c,
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Outcome {
    println!("{}", serde_json::to_string_pretty(v).internal()?);
    Ok(())
}

// ---------------------------------------------------------------------------
// classify
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Images of one specimen.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Treat the images as one three-image evaluation set.
    #[arg(long)]
    pub set: bool,
    #[arg(long)]
    pub specimen_id: Option<String>,
    #[arg(long)]
    pub trap: Option<String>,
    /// Capture date, YYYY-MM-DD.
    #[arg(long)]
    pub date: Option<String>,
    /// Field identification.
    #[arg(long)]
    pub label: Option<String>,
    #[command(flatten)]
    pub server: ServerArgs,
}

pub fn run_classify(a: &ClassifyArgs, json_out: bool) -> Outcome {
    if a.set && a.images.len() != SET_SIZE {
        return Err(bad_input(format!("set requires exactly three images, got {}", a.images.len())));
    }
    let mut uploads = Vec::with_capacity(a.images.len());
    for p in &a.images {
        let bytes = std::fs::read(p).map_err(|e| bad_input(format!("{}: {e}", p.display())))?;
        let name = p.file_name().map_or_else(|| "image".into(), |n| n.to_string_lossy().into_owned());
        uploads.push((name, bytes));
    }
    let meta = IngestMetadata {
        specimen_id: a.specimen_id.clone(),
        trap_id: a.trap.clone(),
        capture_date: a.date.clone(),
        location: None,
        label: a.label.clone(),
    };
    let client = a.server.client();
    let r = runtime()?.block_on(client.ingest(&uploads, Some(&meta)))?;
    if json_out {
        return print_json(&r);
    }
    println!("{}  {}  p = {:.3}", r.specimen_id, r.label, r.confidence);
    if let Some(alert) = &r.alert {
        println!("ALERT ({}): {}", alert.severity, alert.species);
    }
    if r.review_requested {
        println!("queued for expert review");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// review, summary, alerts, export-corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// List predictions awaiting a decision.
    Pending(ServerArgs),
    /// Confirm or override the predicted label of a specimen.
    Decide(DecideArgs),
}

#[derive(Debug, Args)]
pub struct DecideArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long, conflicts_with = "override_label", required_unless_present = "override_label")]
    pub confirm: bool,
    /// Corrected label, e.g. "Anopheles stephensi".
    #[arg(long = "override", value_name = "LABEL")]
    pub override_label: Option<String>,
    #[arg(long)]
    pub reviewer: Option<String>,
    /// Replace an earlier decision.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub server: ServerArgs,
}

pub fn run_review(cmd: &ReviewCommand, json_out: bool) -> Outcome {
    let rt = runtime()?;
    match cmd {
        ReviewCommand::Pending(s) => {
            let items = rt.block_on(s.client().pending())?;
            if json_out {
                return print_json(&items);
            }
            for i in &items {
                println!("{}  {}  p = {:.3}", i.specimen_id, i.label, i.confidence);
            }
            Ok(())
        }
        ReviewCommand::Decide(d) => {
            let decision = match &d.override_label {
                Some(label) => Decision::Override { label: label.clone() },
                None => Decision::Confirm,
            };
            let req = DecisionRequest {
                decision,
                reviewer: d.reviewer.clone(),
                force: d.force,
            };
            let r = rt.block_on(d.server.client().decide(&d.id, &req))?;
            if json_out {
                return print_json(&r);
            }
            match &r.label {
                Some(l) => println!("{}: {l}", r.specimen_id),
                None => println!("{}: recorded", r.specimen_id),
            }
            Ok(())
        }
    }
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    /// Only count specimens captured on or after YYYY-MM-DD.
    #[arg(long)]
    pub since: Option<String>,
    #[command(flatten)]
    pub server: ServerArgs,
}

pub fn run_summary(a: &SummaryArgs, json_out: bool) -> Outcome {
    let s = runtime()?.block_on(a.server.client().summary(a.since.as_deref()))?;
    if json_out {
        return print_json(&s);
    }
    println!("specimens {}  reviewed {}  pending review {}", s.specimens, s.reviewed, s.pending_review);
    for (species, n) in &s.per_species {
        println!("  {species:<26} {n:>6}");
    }
    for (severity, n) in &s.alerts {
        println!("alerts ({severity}): {n}");
    }
    Ok(())
}

pub fn run_alerts(a: &SummaryArgs, json_out: bool) -> Outcome {
    let events = runtime()?.block_on(a.server.client().alerts(a.since.as_deref()))?;
    if json_out {
        return print_json(&events);
    }
    for e in &events {
        println!("{}  {:<8} {}  {}  p = {:.3}", e.timestamp, e.severity, e.species, e.specimen_id, e.confidence);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExportCorpusArgs {
    /// Only specimens with an expert decision.
    #[arg(long)]
    pub reviewed_only: bool,
    /// Write the corpus JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub server: ServerArgs,
}

pub fn run_export_corpus(a: &ExportCorpusArgs) -> Outcome {
    let corpus = runtime()?.block_on(a.server.client().export_corpus(a.reviewed_only))?;
    let text = serde_json::to_string_pretty(&corpus).internal()?;
    match &a.out {
        Some(p) => {
            std::fs::write(p, text).internal()?;
            println!("{}", json!({"items": corpus.items.len(), "out": p}));
        }
        None => println!("{text}"),
    }
    Ok(())
}
