mod commands;
mod config;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{number_list, parse_value};
use error::CliError;

/// Homogenization, large-deviation rates and rare-event sampling for multiscale diffusions.
#[derive(Debug, Parser)]
#[command(name = "msldp", version)]
struct Cli {
    /// Worker threads for the parallel sections (default: one per core).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    /// Include wall-clock times in JSON output (outputs are then no longer reproducible).
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set mc.eps=0.1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write all artifacts to this directory (overrides output.dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    Standard,
    Is,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Effective drift r(x) and diffusivity q(x) as CSV.
    Homogenize {
        #[command(flatten)]
        common: Common,
        /// Comma-separated slow states (grid.points).
        #[arg(long, allow_hyphen_values = true)]
        x: Option<String>,
    },
    /// Local rate L(x, β) and its dual variable as CSV.
    Rate {
        #[command(flatten)]
        common: Common,
        /// Regime 1, 2 or 3 (rate.regime); defaults to the model's scaling.
        #[arg(long)]
        regime: Option<u8>,
        /// Comma-separated velocities (rate.beta).
        #[arg(long, allow_hyphen_values = true)]
        beta: Option<String>,
        /// Comma-separated slow states (rate.x); defaults to x0.
        #[arg(long, allow_hyphen_values = true)]
        x: Option<String>,
    },
    /// Minimize the discretized action plus the functional.
    Path {
        #[command(flatten)]
        common: Common,
        /// path.horizon
        #[arg(long)]
        horizon: Option<f64>,
        /// path.intervals
        #[arg(long)]
        intervals: Option<i64>,
    },
    /// Simulate trajectories and their occupation measure.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// mc.eps
        #[arg(long)]
        eps: Option<f64>,
        /// Number of trajectories (mc.n).
        #[arg(long)]
        n: Option<i64>,
        /// mc.seed
        #[arg(long)]
        seed: Option<i64>,
        /// Drive the trajectories with the importance-sampling control.
        #[arg(long)]
        controlled: bool,
    },
    /// Monte Carlo estimates of E[exp(-h/ε)] as JSON.
    Mc {
        #[command(flatten)]
        common: Common,
        /// mc.scheme
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        /// mc.eps
        #[arg(long)]
        eps: Option<f64>,
        /// mc.n
        #[arg(long)]
        n: Option<i64>,
        /// mc.seed
        #[arg(long)]
        seed: Option<i64>,
        /// Comma-separated descending ε values (mc.ladder).
        #[arg(long)]
        ladder: Option<String>,
    },
    /// Run the analytic-oracle checks and print one line per check.
    Selftest {
        /// Only the checks that finish in seconds.
        #[arg(long, conflicts_with = "only")]
        quick: bool,
        /// Comma-separated check numbers.
        #[arg(long)]
        only: Option<String>,
    },
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}

fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("msldp: cannot size the worker pool: {e}");
            return 1;
        }
    }
    match dispatch(cli.command, cli.timing) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("msldp: {e}");
            e.exit_code()
        }
    }
}

/// Collects `--set` pairs first, then the dedicated flags, so the flags win.
struct Overrides(Vec<(String, toml::Value)>);

impl Overrides {
    fn new(common: &Common) -> Result<Self, CliError> {
        let mut o = Overrides(Vec::new());
        for s in &common.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            o.0.push((k.trim().to_string(), parse_value(v.trim())));
        }
        if let Some(d) = &common.out {
            o.put("output.dir", Some(toml::Value::String(d.display().to_string())));
        }
        Ok(o)
    }

    fn put(&mut self, key: &str, value: Option<toml::Value>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v));
        }
    }

    fn list(&mut self, key: &str, text: &Option<String>) -> Result<(), CliError> {
        if let Some(t) = text {
            self.0.push((key.to_string(), number_list(t)?));
        }
        Ok(())
    }

    fn load(self, common: &Common) -> Result<config::Loaded, CliError> {
        config::load(common.config.as_deref(), &self.0)
    }
}

fn float(v: Option<f64>) -> Option<toml::Value> {
    v.map(toml::Value::Float)
}

fn int(v: Option<i64>) -> Option<toml::Value> {
    v.map(toml::Value::Integer)
}

fn dispatch(command: Command, timing: bool) -> Result<(), CliError> {
    match command {
        Command::Homogenize { common, x } => {
            let mut o = Overrides::new(&common)?;
            o.list("grid.points", &x)?;
            commands::homogenize(&o.load(&common)?)
        }
        Command::Rate {
            common,
            regime,
            beta,
            x,
        } => {
            let mut o = Overrides::new(&common)?;
            o.put("rate.regime", int(regime.map(i64::from)));
            o.list("rate.beta", &beta)?;
            o.list("rate.x", &x)?;
            commands::rate(&o.load(&common)?)
        }
        Command::Path {
            common,
            horizon,
            intervals,
        } => {
            let mut o = Overrides::new(&common)?;
            o.put("path.horizon", float(horizon));
            o.put("path.intervals", int(intervals));
            commands::path(&o.load(&common)?, timing)
        }
        Command::Simulate {
            common,
            eps,
            n,
            seed,
            controlled,
        } => {
            let mut o = Overrides::new(&common)?;
            o.put("mc.eps", float(eps));
            o.put("mc.n", int(n));
            o.put("mc.seed", int(seed));
            commands::simulate(&o.load(&common)?, timing, controlled)
        }
        Command::Mc {
            common,
            scheme,
            eps,
            n,
            seed,
            ladder,
        } => {
            let mut o = Overrides::new(&common)?;
            let scheme = scheme.map(|s| {
                let name = match s {
                    SchemeArg::Standard => "standard",
                    SchemeArg::Is => "is",
                    SchemeArg::Both => "both",
                };
                toml::Value::String(name.into())
            });
            o.put("mc.scheme", scheme);
            o.put("mc.eps", float(eps));
            o.put("mc.n", int(n));
            o.put("mc.seed", int(seed));
            o.list("mc.ladder", &ladder)?;
            commands::mc(&o.load(&common)?, timing)
        }
        Command::Selftest { quick, only } => {
            let ids: Vec<u32> = match only {
                Some(list) => list
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| CliError::Config(format!("{s:?} is not a check number")))
                    })
                    .collect::<Result<_, _>>()?,
                None if quick => msldp::selftest::QUICK.to_vec(),
                None => msldp::selftest::ALL.to_vec(),
            };
            commands::selftest(&ids)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_config_code() {
        assert_eq!(run(["msldp", "frobnicate"].map(OsString::from)), 1);
        assert_eq!(run(["msldp", "mc", "--scheme", "fast"].map(OsString::from)), 1);
        assert_eq!(run(["msldp", "--help"].map(OsString::from)), 0);
    }

    #[test]
    fn missing_config_is_a_config_error() {
        assert_eq!(run(["msldp", "homogenize"].map(OsString::from)), 1);
        assert_eq!(run(["msldp", "selftest", "--only", "99"].map(OsString::from)), 1);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 1);
        assert_eq!(CliError::Numeric(String::new()).exit_code(), 2);
        assert_eq!(CliError::Selftest(1).exit_code(), 3);
    }
}
