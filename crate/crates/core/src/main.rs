use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sufflab::experiments::{
    self, plot, properties, report, run_suff, ExperimentConfig, JointFile, ResultRow, SuffForm,
    SUFF_AGREEMENT_TOL,
};
use sufflab::{Error, FGenerator};

#[derive(Parser)]
#[command(name = "sufflab", version, about = "Approximate sufficiency and contrastive-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Excess risk of KL, chi2 and raw-input linear heads.
    Figure1(RunArgs),
    /// Chi2-trained topic encoders and downstream classification.
    Topic(RunArgs),
    /// InfoNCE-trained linear encoders on vMF half-sphere views.
    Vmf(RunArgs),
    /// Property suite over random discrete instances.
    Equivalence(RunArgs),
    /// Sufficiency of one joint and statistic.
    Suff(SuffArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an SVG plot next to the CSV.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct SuffArgs {
    /// JSON file `{"p": [[...]], "statistic": [...]}`.
    #[arg(long, conflicts_with = "config")]
    joint: Option<PathBuf>,
    /// A `suff` experiment config, as an alternative to `--joint`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_generator)]
    f: Option<FGenerator>,
    #[arg(long)]
    form: Option<SuffForm>,
}

fn parse_generator(s: &str) -> Result<FGenerator, String> {
    FGenerator::ALL
        .into_iter()
        .find(|g| g.token() == s)
        .ok_or_else(|| format!("unknown generator '{s}' (expected kl, chisq or hellinger)"))
}

enum Failure {
    Property,
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("SUFFLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SUFFLAB_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Loads a config file; a missing `experiment` field takes the subcommand name.
fn load(tag: &str, path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    match obj.get("experiment").and_then(|v| v.as_str()) {
        None => {
            obj.insert("experiment".into(), tag.into());
        }
        Some(t) if t != tag => {
            return Err(Error::Config(format!("config is for '{t}', not '{tag}'")));
        }
        Some(_) => {}
    }
    ExperimentConfig::from_json(&value.to_string())
}

fn set_out_dir(cfg: &mut ExperimentConfig, out: PathBuf) {
    match cfg {
        ExperimentConfig::Figure1(c) => c.out_dir = Some(out),
        ExperimentConfig::Topic(c) => c.out_dir = Some(out),
        ExperimentConfig::Vmf(c) => c.out_dir = Some(out),
        ExperimentConfig::Equivalence(c) => c.out_dir = Some(out),
        ExperimentConfig::Suff(_) => {}
    }
}

fn emit(tag: &str, rows: &[ResultRow], out: Option<&PathBuf>, svg: bool) -> Result<(), Error> {
    match out {
        Some(dir) => {
            let csv = dir.join(format!("{tag}.csv"));
            report::write_csv(rows, &csv)?;
            eprintln!("wrote {} rows to {}", rows.len(), csv.display());
            if svg {
                if let Some(doc) = plot(tag, rows) {
                    let path = dir.join(format!("{tag}.svg"));
                    std::fs::write(&path, doc)?;
                    eprintln!("wrote {}", path.display());
                }
            }
        }
        None => {
            print!("{}", report::to_csv(rows));
            if svg {
                eprintln!("--svg needs an output directory (--out or out_dir)");
            }
        }
    }
    Ok(())
}

fn run_experiment(tag: &str, args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = load(tag, &args.config)?;
    if let Some(out) = &args.out {
        set_out_dir(&mut cfg, out.clone());
    }
    if let Some(dir) = cfg.out_dir() {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let out = cfg.out_dir().cloned();
    match &cfg {
        ExperimentConfig::Figure1(c) => emit(tag, &experiments::run_figure1(c)?, out.as_ref(), args.svg)?,
        ExperimentConfig::Topic(c) => emit(tag, &experiments::run_topic(c)?, out.as_ref(), args.svg)?,
        ExperimentConfig::Vmf(c) => emit(tag, &experiments::run_vmf(c)?, out.as_ref(), args.svg)?,
        ExperimentConfig::Equivalence(c) => {
            let outcomes = experiments::run_equivalence(c)?;
            print!("{}", properties::format_table(&outcomes));
            if let Some(dir) = &out {
                let rows: Vec<ResultRow> = outcomes.iter().map(|o| o.to_row(c.seed)).collect();
                report::write_csv(&report::finalize(rows)?, &dir.join(format!("{tag}.csv")))?;
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Err(Failure::Property);
            }
        }
        ExperimentConfig::Suff(c) => print_suff(&c.joint, c.f, c.form)?,
    }
    Ok(())
}

fn print_suff(file: &JointFile, f: FGenerator, form: SuffForm) -> Result<(), Failure> {
    let out = run_suff(file, f, form)?;
    for (name, v) in &out.values {
        println!("{name} {v:.11e}");
    }
    if let Some(d) = out.disagreement {
        println!("max_disagreement {d:.3e}");
        if d > SUFF_AGREEMENT_TOL {
            eprintln!("forms disagree by {d:.3e} (tolerance {SUFF_AGREEMENT_TOL:e})");
            return Err(Failure::Property);
        }
    }
    Ok(())
}

fn run_suff_command(args: &SuffArgs) -> Result<(), Failure> {
    match (&args.joint, &args.config) {
        (Some(path), _) => print_suff(
            &JointFile::load(path)?,
            args.f.unwrap_or(FGenerator::Kl),
            args.form.unwrap_or_default(),
        ),
        (None, Some(path)) => {
            let ExperimentConfig::Suff(c) = load("suff", path)? else {
                unreachable!("load checks the tag")
            };
            print_suff(&c.joint, args.f.unwrap_or(c.f), args.form.unwrap_or(c.form))
        }
        (None, None) => Err(Error::Config("suff needs --joint or --config".into()).into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().map_err(Failure::from).and_then(|()| match &cli.command {
        Command::Figure1(a) => run_experiment("figure1", a),
        Command::Topic(a) => run_experiment("topic", a),
        Command::Vmf(a) => run_experiment("vmf", a),
        Command::Equivalence(a) => run_experiment("equivalence", a),
        Command::Suff(a) => run_suff_command(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Property) => ExitCode::from(1),
        Err(Failure::Run(e @ Error::Config(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
