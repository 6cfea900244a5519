//! `l2s <gen-data|pipeline|train|sample|eval|check> [--config PATH] [--seed N]
//! [--stage 1|2] [--out DIR] [--force]`
//!
//! Exit codes: 0 success, 2 usage error, 3 validation failure, 4 numeric failure.
//! The resolved config hash is the first line on stdout; everything else goes to
//! stderr.

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};

use crate::check;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::summary_table;
use crate::workflow::{self, Paths, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "l2s", version, about = "Layout-togglable story diffusion on synthetic latents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train, held-out and eval story sets
    GenData(Common),
    /// Cluster, group and annotate frame records into train and bench manifests
    Pipeline(Common),
    /// Train stage 1 (global branch) or stage 2 (subject branch)
    Train(Common),
    /// Sample stories from the latest checkpoint and render them
    Sample(Common),
    /// Score the stage-2 model with and without layout
    Eval(Common),
    /// Run the invariant and oracle suite
    Check(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run config; built-in defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 1)]
    pub stage: u8,
    #[arg(long, default_value = "l2s-out")]
    pub out: PathBuf,
    /// Load checkpoints whose model config differs from the run config
    #[arg(long)]
    pub force: bool,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::Pipeline(c)
            | Command::Train(c)
            | Command::Sample(c)
            | Command::Eval(c)
            | Command::Check(c) => c,
        }
    }
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

/// First SIGINT asks training to finish its step and checkpoint; the handler only
/// sets an atomic flag, which is async-signal-safe.
fn install_sigint() {
    let handler: extern "C" fn(libc::c_int) = on_sigint;
    // SAFETY: the handler touches nothing but an atomic.
    unsafe {
        libc::signal(libc::SIGINT, handler as libc::sighandler_t);
    }
}

/// Worker count from `L2S_THREADS`; 1 (serial reference mode) when unset.
pub fn thread_count() -> Result<usize> {
    match std::env::var("L2S_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("L2S_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: &Command, cfg: &RunConfig) -> Result<i32> {
    let c = cmd.common();
    let paths = Paths::new(&c.out);
    match cmd {
        Command::GenData(_) => {
            for (split, n) in workflow::gen_data(cfg, &paths)? {
                log::info!("{split}: {n} stories");
            }
        }
        Command::Pipeline(_) => {
            let (train, bench) = workflow::pipeline(cfg, &paths)?;
            for m in [&train, &bench] {
                log::info!(
                    "{:?}: {} sets, {} prompts, lengths {:?}",
                    m.header.split,
                    m.header.sets,
                    m.header.prompts,
                    m.header.length_histogram
                );
            }
        }
        Command::Train(_) => {
            install_sigint();
            let stop = || INTERRUPTED.load(Ordering::SeqCst);
            let st = workflow::train(cfg, &paths, &TrainOptions { stage: c.stage, force: c.force, stop: &stop })?;
            if INTERRUPTED.load(Ordering::SeqCst) {
                log::warn!("interrupted at step {}; checkpoint written", st.step);
            }
            log::info!("stage {} at step {} -> {}", st.stage, st.step, paths.checkpoint(st.stage).display());
        }
        Command::Sample(_) => {
            let imgs = workflow::sample_prompts(cfg, &paths, c.force)?;
            log::info!("wrote {} images under {}", imgs.len(), paths.samples_dir().display());
        }
        Command::Eval(_) => {
            let out = workflow::evaluate(cfg, &paths, c.force)?;
            eprint!("{}", summary_table(&out.records));
        }
        Command::Check(_) => {
            let results: Vec<_> = check::suite()
                .iter()
                .map(|k| {
                    let r = k.run();
                    eprintln!("{}", check::report_line(&r));
                    r
                })
                .collect();
            let failed = results.iter().filter(|r| !r.passed).count();
            eprintln!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parse `argv` (program name first) and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    let result = (|| {
        let cfg = resolve_config(cli.command.common())?;
        println!("config_hash={}", cfg.hash());
        let threads = thread_count()?;
        // a second call in one process (tests) finds the pool already built
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        execute(&cli.command, &cfg)
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
