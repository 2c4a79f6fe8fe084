use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use esnmpc::experiment::{self, ExperimentConfig, Variant};
use esnmpc::ident::{default_washout, LsOptions};
use esnmpc::model::{load_model, model_to_string};
use esnmpc::reduce::{reduce_and_retrain, TABLE_HEADER};
use esnmpc::{Error, Model};

/// ESN identification, reduction and offset-free MPC on the pH benchmark.
#[derive(Debug, Parser)]
#[command(name = "esnmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML); defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reservoir seed for identify/reduce; training excitation seed for
    /// excite (validation uses seed + 1).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model file used by reduce, validate and control.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Identification variant: 1, 2a, 2b or 2full.
    #[arg(long, global = true)]
    variant: Option<Variant>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Excite the plant and write training and validation datasets.
    Excite,
    /// Train the network variants and append fitting-table rows.
    Identify,
    /// Prune a LASSO-trained model and retrain the reduced network.
    Reduce,
    /// Free-run a model on the validation data.
    Validate,
    /// Run the tracking and disturbance scenario in closed loop.
    Control,
    /// Compare MPC solve times of the full and reduced models.
    Bench,
}

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
    header: String,
    model: Option<PathBuf>,
    variant: Option<Variant>,
}

impl Ctx {
    fn path(&self, p: &str) -> PathBuf {
        self.out.join(p)
    }

    fn datasets(&self) -> Result<(esnmpc::Data, esnmpc::Data)> {
        let read = |p: &str| {
            let path = self.path(p);
            experiment::read_dataset(&path)
                .with_context(|| format!("reading dataset {}", path.display()))
        };
        Ok((
            read(&self.config.paths.train)?,
            read(&self.config.paths.validation)?,
        ))
    }

    fn load(&self, default: &str) -> Result<(Model, PathBuf)> {
        let path = self.model.clone().unwrap_or_else(|| self.path(default));
        let m = load_model(&path).with_context(|| format!("loading model {}", path.display()))?;
        Ok((m, path))
    }

    fn washout(&self, m: &Model) -> usize {
        self.config
            .training
            .washout
            .unwrap_or_else(|| default_washout(m.reservoir.certify().alpha))
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, format!("{}{body}", self.header))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn save_model(&self, m: &Model, name: &str) -> Result<PathBuf> {
        self.write(name, &model_to_string(m))
    }

    fn append_rows(&self, rows: &[String]) -> Result<()> {
        let path = self.path("table.txt");
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        if fresh {
            writeln!(f, "{}{TABLE_HEADER}", self.header)?;
        }
        for r in rows {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

fn model_file(v: Variant) -> String {
    format!("model_{}.txt", v.key())
}

fn excite(cx: &Ctx) -> Result<()> {
    let (train, validation) = experiment::excite(&cx.config)?;
    for (d, name) in [
        (&train, &cx.config.paths.train),
        (&validation, &cx.config.paths.validation),
    ] {
        let path = cx.path(name);
        experiment::write_dataset(d, &cx.header, &path)?;
        println!("wrote {} ({} samples)", path.display(), d.len());
    }
    Ok(())
}

fn identify(cx: &Ctx) -> Result<()> {
    let (train, validation) = cx.datasets()?;
    let id = experiment::identify(&cx.config, &train, &validation)?;
    let variants: Vec<Variant> = match cx.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for v in &variants {
        cx.save_model(id.model(*v), &model_file(*v))?;
        rows.push(id.row(*v).to_string());
    }
    let mut report = format!(
        "washout {}\noperator_norm {:.6}\nspectral_radius {:.6}\ncertified {}\nlambda_max {:e}\n{}\n",
        id.washout,
        id.certificate.operator_norm,
        id.certificate.spectral_radius,
        id.certificate.alpha.is_some(),
        id.lambda_max,
        id.report
    );
    report.push_str("lambda_ratio | lambda | support | closure | converged | retrained_fitting\n");
    for c in &id.candidates {
        let f = c
            .fitting_retrain
            .map_or_else(|| "-".to_string(), |f| format!("{f:.2}%"));
        report.push_str(&format!(
            "{:.4e} | {:.4e} | {} | {} | {} | {f}\n",
            c.ratio, c.lambda, c.support, c.closure, c.converged
        ));
    }
    cx.write("identify.txt", &report)?;
    cx.append_rows(&rows)?;
    println!("{TABLE_HEADER}");
    for r in rows {
        println!("{r}");
    }
    Ok(())
}

fn reduce(cx: &Ctx) -> Result<()> {
    let (train, validation) = cx.datasets()?;
    let (m, _) = cx.load(&model_file(Variant::Lasso))?;
    let washout = cx.washout(&m);
    let dt = m.scaling.normalize(&train.with_washout(washout)?);
    let dv = m.scaling.normalize(&validation.with_washout(washout)?);
    let opts = LsOptions {
        rcond: cx.config.training.rcond,
    };
    let red = reduce_and_retrain(&m.reservoir, &m.readout, &dt, &dv, &opts)?;
    let reduced = Model {
        reservoir: red.reservoir.clone(),
        readout: red.readout.clone(),
        scaling: m.scaling,
    };
    let path = cx.save_model(&reduced, "model_reduced.txt")?;
    cx.write("reduce.txt", &format!("{}\n", red.report))?;
    println!("{TABLE_HEADER}");
    for r in red.report.table_rows() {
        println!("{r}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn validate(cx: &Ctx) -> Result<()> {
    let (_, validation) = cx.datasets()?;
    let (m, path) = cx.load(&cx.config.paths.full_model)?;
    let run = experiment::validate(&m, &validation, cx.washout(&m))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let mut csv = String::from("time,y_sys,y_model\n");
    for k in 0..run.time.len() {
        csv.push_str(&format!(
            "{},{},{}\n",
            run.time[k], run.y_sys[k], run.y_model[k]
        ));
    }
    let out = cx.write(&format!("validation_{stem}.csv"), &csv)?;
    println!("states {} fitting {:.2}%", m.n(), run.fitting);
    println!("wrote {}", out.display());
    Ok(())
}

fn control(cx: &Ctx) -> Result<()> {
    let (m, _) = cx.load(&cx.config.paths.reduced_model)?;
    let run = experiment::run_scenario(&m, &cx.config.mpc, &cx.config.scenario, cx.washout(&m))?;
    let log = cx.path("control_log.csv");
    experiment::write_log(&run.log, &cx.header, &log)?;
    cx.write("control_summary.txt", &format!("{}\n", run.summary))?;
    println!("{}", run.summary);
    println!("wrote {}", log.display());
    Ok(())
}

fn bench(cx: &Ctx) -> Result<()> {
    let load = |p: &str| {
        let path = cx.path(p);
        load_model(&path).with_context(|| format!("loading model {}", path.display()))
    };
    let full = load(&cx.config.paths.full_model)?;
    let reduced = match &cx.model {
        Some(p) => load_model(p).with_context(|| format!("loading model {}", p.display()))?,
        None => load(&cx.config.paths.reduced_model)?,
    };
    let b = experiment::bench(&full, &reduced, &cx.config, cx.washout(&full))?;
    let mut csv = String::from("step,full_solve_time,reduced_solve_time\n");
    for (k, (a, r)) in b.full_times.iter().zip(&b.reduced_times).enumerate() {
        csv.push_str(&format!("{k},{a},{r}\n"));
    }
    cx.write("bench.csv", &csv)?;
    cx.write("bench.txt", &format!("{b}\n"))?;
    println!("{b}");
    Ok(())
}

fn setup(cli: &Cli) -> Result<Ctx> {
    let mut config = match &cli.config {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        match cli.command {
            Command::Excite => {
                config.excitation.train_seed = s;
                config.excitation.validation_seed = s.wrapping_add(1);
            }
            _ => config.reservoir.seed = s,
        }
    }
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| Path::new(&config.paths.out).to_path_buf());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let header = config.header()?;
    Ok(Ctx {
        config,
        out,
        header,
        model: cli.model.clone(),
        variant: cli.variant,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let cx = setup(cli)?;
    match cli.command {
        Command::Excite => excite(&cx),
        Command::Identify => identify(&cx),
        Command::Reduce => reduce(&cx),
        Command::Validate => validate(&cx),
        Command::Control => control(&cx),
        Command::Bench => bench(&cx),
    }
}

/// 1 for bad input (arguments, config, files), 2 for numerical failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Io(_) | Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_)) => {
            1
        }
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
