mod commands;
mod selfcheck;

use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use meshrecover_core::Error;

use commands::Cmd;

#[derive(Debug, Parser)]
#[command(
    name = "meshrecover",
    version,
    about = "Single-view partial body meshes and masked-autoencoder completion",
    long_about = "Renders depth+UV frames, matches lifted points to template vertices, \
                  and trains and evaluates a masked autoencoder that completes the \
                  partial mesh.\n\nExit codes: 0 success, 1 config error, \
                  2 degenerate input, 3 I/O or format error.\n\n\
                  MESHRECOVER_THREADS caps the worker thread count."
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Stable exit code for a pipeline error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::DegenerateInput(_) | Error::NoBodyAtPixel { .. } | Error::NonFinite(_) => 2,
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Obj { .. }
        | Error::Dimension { .. }
        | Error::Template(_) => 3,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("MESHRECOVER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MESHRECOVER_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|_| commands::run(cli.cmd));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Markdown flag reference for every subcommand, as kept in `docs/cli.md`.
#[allow(dead_code)]
pub fn markdown_reference() -> String {
    let mut cmd = Cli::command();
    let mut out = String::from("# meshrecover command reference\n\n");
    out.push_str("Generated from the argument parser; run `meshrecover help-markdown` to refresh.\n\n");
    out.push_str("```text\n");
    out.push_str(&cmd.render_long_help().to_string());
    out.push_str("```\n");
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .filter(|n| n != "help-markdown")
        .collect();
    for name in names {
        let sub = cmd.find_subcommand_mut(&name).expect("listed subcommand");
        let mut sub = sub.clone().bin_name(format!("meshrecover {name}"));
        out.push_str(&format!("\n## {name}\n\n```text\n"));
        out.push_str(&sub.render_long_help().to_string());
        out.push_str("```\n");
    }
    out
}
