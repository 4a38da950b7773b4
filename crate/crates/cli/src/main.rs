use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use imobe_cli::config::{Config, Overrides};
use imobe_cli::scenario::{self, Inject, ScenarioArgs, Source};
use imobe_cli::{read_file, table, CliError, ReportArgs, DEMO_FIXTURE, EXIT_FAILED, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "imobe", version, about = "Outcome-based education assessment platform")]
struct Cli {
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

/// Settings that override the config file.
#[derive(Debug, Args)]
struct Settings {
    /// key=value config file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long = "store", global = true, value_name = "PATH")]
    store_path: Option<PathBuf>,
    #[arg(long = "listen", global = true, value_name = "ADDR")]
    listen_address: Option<String>,
    #[arg(long, global = true)]
    token_secret: Option<String>,
    #[arg(long, global = true)]
    token_ttl_s: Option<u64>,
    #[arg(long, global = true)]
    phase_timeout_ms: Option<u64>,
    #[arg(long, global = true)]
    workflow_budget_ms: Option<u64>,
    #[arg(long, global = true)]
    anomaly_r: Option<usize>,
    #[arg(long, global = true)]
    anomaly_w_s: Option<u64>,
    #[arg(long = "attainment-threshold", global = true)]
    attainment_threshold: Option<f64>,
}

impl Settings {
    fn overrides(&self) -> Overrides {
        Overrides {
            store_path: self.store_path.clone(),
            listen_address: self.listen_address.clone(),
            token_secret: self.token_secret.clone(),
            token_ttl_s: self.token_ttl_s,
            phase_timeout_ms: self.phase_timeout_ms,
            workflow_budget_ms: self.workflow_budget_ms,
            anomaly_r: self.anomaly_r,
            anomaly_w_s: self.anomaly_w_s,
            attainment_threshold: self.attainment_threshold,
        }
    }

    fn resolve(&self) -> Result<Config, CliError> {
        let file = match &self.config {
            Some(path) => Overrides::parse(&read_file(path)?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
            None => Overrides::default(),
        };
        Config::resolve(file.overlay(self.overrides())).map_err(|e| CliError::Usage(format!("config: {e}")))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InjectArg {
    StoreRemoved,
    ForgedToken,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP gateway until SIGTERM or Ctrl-C
    Serve,
    /// Load outcomes, items, users and scores from a JSON fixture
    Seed {
        /// Fixture file; the bundled demo course when omitted
        fixture: Option<PathBuf>,
    },
    /// Import scores from CSV (course_id,item_id,student_id,raw_score)
    Import {
        csv: PathBuf,
        /// Principal recorded as the writer
        #[arg(long = "as", value_name = "PRINCIPAL")]
        principal: Option<String>,
    },
    /// Run an assessment and print the presented report
    Report {
        #[arg(long)]
        course: String,
        #[arg(long, conflicts_with = "item")]
        student: Option<String>,
        #[arg(long)]
        item: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Requesting principal; the first academician when omitted
        #[arg(long = "as", value_name = "PRINCIPAL")]
        principal: Option<String>,
        /// Aligned table instead of JSON
        #[arg(long)]
        pretty: bool,
    },
    /// Run the canonical request end to end and check its message trace
    SimulateScenario {
        /// Fixture to seed; otherwise a copy of the configured store, or the demo course
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, value_enum)]
        inject: Option<InjectArg>,
        #[arg(long)]
        course: Option<String>,
        #[arg(long = "as", value_name = "PRINCIPAL")]
        principal: Option<String>,
    },
    /// Print the audit log and anomaly flags
    Audit {
        /// Only events after this id
        #[arg(long)]
        since: Option<u64>,
        #[arg(long)]
        pretty: bool,
    },
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let config = cli.settings.resolve()?;
    match cli.command {
        Command::Serve => {
            imobe_cli::serve(&config, |address| {
                println!("listening on {address}");
                let _ = std::io::stdout().flush();
            })?;
            eprintln!("shut down cleanly");
        }
        Command::Seed { fixture } => {
            let text = match fixture {
                Some(path) => read_file(&path)?,
                None => DEMO_FIXTURE.to_string(),
            };
            print_json(&imobe_cli::seed(&config, &text)?);
        }
        Command::Import { csv, principal } => {
            print_json(&imobe_cli::import(&config, &csv, principal.as_deref())?);
        }
        Command::Report {
            course,
            student,
            item,
            threshold,
            principal,
            pretty,
        } => {
            let args = ReportArgs {
                course,
                student,
                item,
                threshold,
                principal,
            };
            let doc = imobe_cli::report(&config, &args)?;
            if pretty {
                println!("{}", table::report(&doc));
            } else {
                print_json(&doc);
            }
        }
        Command::SimulateScenario {
            fixture,
            inject,
            course,
            principal,
        } => {
            let source = match fixture {
                Some(path) => Source::Fixture(read_file(&path)?),
                None if config.store_path.exists() => Source::Store(config.store_path.clone()),
                None => Source::Fixture(DEMO_FIXTURE.to_string()),
            };
            let args = ScenarioArgs {
                source,
                inject: inject.map(|i| match i {
                    InjectArg::StoreRemoved => Inject::StoreRemoved,
                    InjectArg::ForgedToken => Inject::ForgedToken,
                }),
                course,
                principal,
            };
            let run = scenario::simulate(&config, &args)?;
            println!("scenario: {} requests course {}", run.principal, run.course_id);
            for line in run.trace_lines().into_iter().chain(run.verdict_lines()) {
                println!("{line}");
            }
            if run.divergence().is_some() {
                return Ok(EXIT_FAILED);
            }
        }
        Command::Audit { since, pretty } => {
            let dump = imobe_cli::audit(&config, since)?;
            if pretty {
                let header: Vec<String> = ["id", "ts", "principal", "action", "subject"].map(String::from).into();
                let rows: Vec<Vec<String>> = dump
                    .events
                    .iter()
                    .map(|e| {
                        vec![
                            e.event_id.to_string(),
                            e.ts.to_string(),
                            e.principal.clone(),
                            format!("{:?}", e.action),
                            e.subject.clone(),
                        ]
                    })
                    .collect();
                println!("{}", table::render(&header, &rows));
                for flag in &dump.flags {
                    println!("FLAG {}", serde_json::to_string(flag).expect("flag serializes"));
                }
            } else {
                print_json(&dump);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
