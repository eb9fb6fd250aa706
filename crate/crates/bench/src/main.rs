use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use eifmm_bench::{emit_report, run_benchmark, Args};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) if e.use_stderr() => {
            let usage = Args::command().render_usage();
            let msg = e.render().to_string();
            eprint!("{msg}");
            if !msg.contains("Usage") {
                eprintln!("\n{usage}");
            }
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run_benchmark(&args).and_then(|report| emit_report(&report, args.format, args.out.as_deref())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
