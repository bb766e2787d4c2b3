//! Command-line arguments and their mapping onto [`EngineConfig`].

use std::net::SocketAddr;
use std::path::PathBuf;

use autostudio_core::engine::{BackendChoice, DrawerChoice, EngineConfig};
use autostudio_core::layout::FrameSize;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "autostudio", version, about = "Multi-turn, multi-subject image generation sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay a dialogue script into a session directory.
    Run(RunArgs),
    /// Serve the session API and the `/draw` protocol over HTTP.
    Serve(ServeArgs),
    /// Check a layout file against the rulebook.
    ValidateLayout(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DrawerKind {
    Toy,
    Http,
}

/// Overrides shared by `run` and `serve`; each one replaces the config value.
#[derive(Debug, Clone, Default, Args)]
pub struct EngineFlags {
    /// TOML file mirroring the engine config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    #[arg(long, value_enum)]
    pub drawer: Option<DrawerKind>,
    /// Scripted transcript for the mock backend.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of the schedule, from the noisy end, with guidance injection.
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Frame size as WxH.
    #[arg(long)]
    pub frame: Option<FrameSize>,
    #[arg(long)]
    pub no_supervisor: bool,
    #[arg(long)]
    pub alpha_one: bool,
    #[arg(long)]
    pub guidance_off: bool,
    /// Fall back to rule-based layouts and template captions when the agents fail.
    #[arg(long)]
    pub best_effort: bool,
}

impl EngineFlags {
    /// The config file (or defaults with environment overrides) with the flags applied.
    pub fn resolve(&self) -> anyhow::Result<EngineConfig> {
        let mut cfg = match &self.config {
            Some(path) => EngineConfig::load(path)?,
            None => {
                let mut cfg = EngineConfig::default();
                cfg.apply_env(|k| std::env::var(k).ok());
                cfg
            }
        };
        self.apply(&mut cfg);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut EngineConfig) {
        if let Some(b) = self.backend {
            cfg.backend = match b {
                Backend::Mock => BackendChoice::Mock,
                Backend::Http => BackendChoice::Http,
            };
        }
        if let Some(d) = self.drawer {
            cfg.drawer = match d {
                DrawerKind::Toy => DrawerChoice::Toy,
                DrawerKind::Http => DrawerChoice::Http,
            };
        }
        if let Some(t) = &self.transcript {
            cfg.transcript = Some(t.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.r {
            cfg.r = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.frame {
            cfg.frame = v;
        }
        cfg.ablations.no_supervisor |= self.no_supervisor;
        cfg.ablations.alpha_one |= self.alpha_one;
        cfg.ablations.guidance_off |= self.guidance_off;
        if self.best_effort {
            cfg.strict = false;
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dialogue script: `{"turns": [{"prompt": ..., "mode": ..., "edit_target": ...}]}`.
    #[arg(long)]
    pub script: PathBuf,
    /// Session directory; must not already hold a session.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineFlags,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; `:8080` listens on every interface.
    #[arg(long, default_value = "127.0.0.1:8080", value_parser = parse_addr)]
    pub addr: SocketAddr,
    /// Directory holding one subdirectory per session.
    #[arg(long, default_value = "sessions")]
    pub sessions: PathBuf,
    #[command(flatten)]
    pub engine: EngineFlags,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Layout as list-literal lines or as JSON `{frame, entries}`.
    pub file: PathBuf,
    /// Frame for list-literal input.
    #[arg(long, default_value = "1024x1024")]
    pub frame: FrameSize,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

pub fn parse_addr(s: &str) -> Result<SocketAddr, String> {
    let full = if s.starts_with(':') { format!("0.0.0.0{s}") } else { s.to_string() };
    full.parse().map_err(|e| format!("bad address {s:?}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_config() {
        let cli = Cli::try_parse_from([
            "autostudio", "run", "--script", "s.json", "--out", "o", "--backend", "mock", "--drawer", "toy", "--seed", "7",
            "--r", "0.9", "--frame", "512x384", "--no-supervisor", "--guidance-off",
        ])
        .unwrap();
        let Command::Run(run) = cli.command else { panic!("not run") };
        let mut cfg = EngineConfig::default();
        run.engine.apply(&mut cfg);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.r, 0.9);
        assert_eq!(cfg.frame, FrameSize::new(512, 384));
        assert!(cfg.ablations.no_supervisor && cfg.ablations.guidance_off && !cfg.ablations.alpha_one);
        assert_eq!(cfg.alpha, EngineConfig::default().alpha);
        assert!(cfg.strict);
    }

    #[test]
    fn addresses() {
        assert_eq!(parse_addr(":8080").unwrap(), "0.0.0.0:8080".parse().unwrap());
        assert_eq!(parse_addr("127.0.0.1:9").unwrap().port(), 9);
        assert!(parse_addr("nowhere").is_err());
        assert!(Cli::try_parse_from(["autostudio", "serve", "--frame", "12"]).is_err());
    }
}
