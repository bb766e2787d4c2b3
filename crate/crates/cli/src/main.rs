use std::process::ExitCode;

use anyhow::{bail, Context};
use autostudio_cli::args::{Cli, Command, RunArgs, ServeArgs, ValidateArgs};
use autostudio_cli::check_layout;
use autostudio_cli::server::{router, AppState};
use autostudio_core::engine::{replay, Engine, Script, SESSION_FILE};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Serve(a) => serve(a),
        Command::ValidateLayout(a) => validate_layout(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let config = args.engine.resolve()?;
    let script = Script::load(&args.script)?;
    if args.out.join(SESSION_FILE).exists() {
        bail!("{} already holds a session", args.out.display());
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let engine = Engine::from_config(&config)?;
    let session = replay(&engine, &script, config, &args.out);
    let session = match session {
        Ok(s) => s,
        Err(e) => {
            eprintln!("turn failed: {e}");
            eprintln!("completed turns are kept in {}", args.out.display());
            return Ok(ExitCode::FAILURE);
        }
    };
    for t in &session.turns {
        let subjects = t.final_layout.entries.iter().filter(|e| !e.id.is_component()).count();
        println!(
            "turn {}: {:?} {} subject(s), layout {:?}, {} hard violation(s) -> {}",
            t.k,
            t.mode,
            subjects,
            t.layout_origin,
            t.violations.len(),
            t.image
        );
    }
    println!("session {} written to {}", session.id, args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> anyhow::Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let config = args.engine.resolve()?;
    std::fs::create_dir_all(&args.sessions).with_context(|| format!("creating {}", args.sessions.display()))?;
    let state = std::sync::Arc::new(AppState::new(args.sessions.clone(), config));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.addr).await.with_context(|| format!("binding {}", args.addr))?;
        tracing::info!(addr = %listener.local_addr()?, sessions = %args.sessions.display(), "listening");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
            })
            .await?;
        Ok(ExitCode::SUCCESS)
    })
}

fn validate_layout(args: ValidateArgs) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(&args.file).with_context(|| format!("reading {}", args.file.display()))?;
    let report = match check_layout(&text, args.frame) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}: {e}", args.file.display());
            return Ok(ExitCode::from(2));
        }
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{} entries on a {} frame", report.entries, report.frame);
        for v in &report.violations {
            println!("violation {:?}: {}", v.kind, v.message);
        }
        for v in &report.advisories {
            println!("advisory {:?}: {}", v.kind, v.message);
        }
        if report.violations.is_empty() {
            println!("compliant");
        }
    }
    Ok(if report.violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
