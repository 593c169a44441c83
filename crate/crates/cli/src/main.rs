use std::process::ExitCode;

use maskrl_cli::config::{parse_config, ConfigError};
use maskrl_cli::run::{all_finite, execute, Report};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    let cfg = match parse_config(std::env::args_os()) {
        Ok(c) => c,
        Err(ConfigError::Args(e)) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&cfg, &mut std::io::stderr()) {
        Ok(Report::Trained(results)) => {
            for r in &results {
                println!(
                    "{} map {} seed {}: r_episode {:.3} a_null {:.3} a_busy {:.3} a_owner {:.3}",
                    r.strategy.name(),
                    r.map_size,
                    r.seed,
                    r.metrics.r_episode,
                    r.metrics.a_null,
                    r.metrics.a_busy,
                    r.metrics.a_owner
                );
            }
            if all_finite(&results) {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: non-finite training statistics");
                ExitCode::FAILURE
            }
        }
        Ok(Report::Evaluated(ev)) => {
            println!(
                "masks removed over {} episodes: return {:.3} a_null {:.3} a_busy {:.3} a_owner {:.3}",
                ev.episodes.len(),
                ev.mean_return,
                ev.a_null,
                ev.a_busy,
                ev.a_owner
            );
            if ev.mean_return.is_finite() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            if e.is_non_finite() {
                eprintln!("error: training diverged: {e}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::FAILURE
        }
    }
}
