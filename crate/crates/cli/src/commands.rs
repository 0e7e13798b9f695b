use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};

use nmr_core::estimates::{
    crisis_nmr_adjustment, estimate_all, write_estimates, write_outliers, write_trajectories,
    EstimateConfig, NoDataScale,
};
use nmr_core::ingest::{
    load_countries, load_observations, load_u5mr_draws, preprocess as run_preprocess,
    save_countries, save_observations, write_audit, PreprocessConfig,
};
use nmr_core::model::{CountryInput, Observation, SeriesType, SizeCategory};
use nmr_core::plot::country_svg;
use nmr_core::posterior::FitData;
use nmr_core::sampler::{
    self, diagnose as run_diagnose, parameter_names, ChainConfig, ParamDiagnostic, PosteriorDraws,
};
use nmr_core::splines::DEFAULT_HORIZON;
use nmr_core::synth::{generate, write_dataset, Scenario};
use nmr_core::validation::{run_validation, write_predictions, write_report, ValidationConfig};

use crate::settings::Settings;
use crate::Failure;

pub const RHAT_LIMIT: f64 = 1.1;

const OBS_FILE: &str = "observations.csv";
const COUNTRY_FILE: &str = "countries.csv";
const U5MR_DRAWS_FILE: &str = "u5mr_draws.csv";
const AUDIT_FILE: &str = "preprocess_audit.csv";
const FIT_SETTINGS_FILE: &str = "fit_settings.txt";

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn make_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Data(format!("missing input {}", path.display())))
    }
}

fn check_chain(c: &ChainConfig) -> Result<(), Failure> {
    c.validate().map_err(Failure::from)
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file (`key = value`); defaults apply to missing keys.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn simulate(a: SimulateArgs, file: &Settings) -> Result<(), Failure> {
    file.restrict(&["seed"])?;
    let (scenario, scenario_seed) = match &a.scenario {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            let seed = nmr_core::config::parse_key_values(&text)
                .ok()
                .and_then(|m| m.get("seed").and_then(|s| s.parse::<u64>().ok()));
            (Scenario::from_text(&text)?, seed)
        }
        None => (Scenario::default(), None),
    };
    let seed = file.pick(a.seed.or(scenario_seed), "seed", 1)?;
    let data = generate(&scenario, seed)?;
    write_dataset(&a.out, &data)?;
    info!(
        "wrote {} observations for {} countries to {}",
        data.observations.len(),
        data.countries.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    countries: PathBuf,
    /// Optional U5MR draws (`country_id, draw_index, year, u5mr`).
    #[arg(long)]
    u5mr_draws: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

const PREPROCESS_KEYS: [&str; 6] = [
    "seed",
    "cv_threshold",
    "n_sims",
    "default_size",
    "recombine",
    "impute.",
];

fn preprocess_config(file: &Settings, seed: Option<u64>) -> Result<PreprocessConfig, Failure> {
    let d = PreprocessConfig::default();
    let mut c = PreprocessConfig {
        seed: file.pick(seed, "seed", d.seed)?,
        cv_threshold: file.pick(None, "cv_threshold", d.cv_threshold)?,
        n_sims: file.pick(None, "n_sims", d.n_sims)?,
        default_size: file.pick(None, "default_size", d.default_size)?,
        recombine: file.pick(None, "recombine", d.recombine)?,
        table: d.table,
    };
    for (key, value) in file.with_prefix("impute.") {
        let (series, size) = key.split_once('.').ok_or_else(|| {
            Failure::Usage(format!(
                "expected impute.<series>.<size>, got 'impute.{key}'"
            ))
        })?;
        let series: SeriesType = series.parse()?;
        let size: SizeCategory = size.parse()?;
        let v: f64 = value
            .parse()
            .map_err(|_| Failure::Usage(format!("invalid value '{value}' for 'impute.{key}'")))?;
        c.table.set(series, size, v)?;
    }
    if !(c.cv_threshold > 0.0) || c.n_sims == 0 {
        return Err(Failure::Usage(
            "cv_threshold and n_sims must be positive".into(),
        ));
    }
    Ok(c)
}

fn write_fit_ready(
    dir: &Path,
    obs: &[Observation],
    countries: &[CountryInput],
) -> Result<(), Failure> {
    make_dir(dir)?;
    save_observations(&dir.join(OBS_FILE), obs)?;
    save_countries(&dir.join(COUNTRY_FILE), countries)?;
    Ok(())
}

pub fn preprocess(a: PreprocessArgs, file: &Settings) -> Result<(), Failure> {
    file.restrict(&PREPROCESS_KEYS)?;
    let config = preprocess_config(file, a.seed)?;
    require(&a.obs)?;
    require(&a.countries)?;
    let obs = load_observations(&a.obs)?;
    let countries = load_countries(&a.countries)?;
    let pre = run_preprocess(&obs, &countries, &config)?;
    write_fit_ready(&a.out, &pre.observations, &pre.countries)?;
    write_audit(create(&a.out.join(AUDIT_FILE))?, &pre.audit)?;
    if let Some(p) = &a.u5mr_draws {
        require(p)?;
        fs::copy(p, a.out.join(U5MR_DRAWS_FILE)).map_err(|e| io_err(p, e))?;
    }
    info!(
        "{} observations ({} included), {} audit entries",
        pre.observations.len(),
        pre.observations.iter().filter(|o| o.included).count(),
        pre.audit.len()
    );
    Ok(())
}

/// A dataset directory. Raw directories (no audit file) are preprocessed
/// on the fly with the settings in effect.
struct Dataset {
    observations: Vec<Observation>,
    countries: Vec<CountryInput>,
    audit: Option<Vec<nmr_core::ingest::AuditEntry>>,
    draws_file: Option<PathBuf>,
}

fn load_dataset(dir: &Path, file: &Settings, seed: u64) -> Result<Dataset, Failure> {
    let (op, cp) = (dir.join(OBS_FILE), dir.join(COUNTRY_FILE));
    require(&op)?;
    require(&cp)?;
    let observations = load_observations(&op)?;
    let mut countries = load_countries(&cp)?;
    let dp = dir.join(U5MR_DRAWS_FILE);
    let draws_file = dp.exists().then_some(dp);
    if let Some(p) = &draws_file {
        load_u5mr_draws(p, &mut countries)?;
    }
    if dir.join(AUDIT_FILE).exists() {
        return Ok(Dataset {
            observations,
            countries,
            audit: None,
            draws_file,
        });
    }
    warn!(
        "{} has no preprocessing audit; preprocessing it now",
        dir.display()
    );
    let pre = run_preprocess(
        &observations,
        &countries,
        &preprocess_config(file, Some(seed))?,
    )?;
    Ok(Dataset {
        observations: pre.observations,
        countries: pre.countries,
        audit: Some(pre.audit),
        draws_file,
    })
}

#[derive(Debug, Args)]
pub struct ChainArgs {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iter: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Final year of the estimation period (midyear time).
    #[arg(long)]
    horizon: Option<f64>,
}

const CHAIN_KEYS: [&str; 7] = [
    "chains",
    "iter",
    "burnin",
    "thin",
    "seed",
    "horizon",
    "theta_steps",
];

fn chain_config(a: &ChainArgs, file: &Settings) -> Result<(ChainConfig, f64), Failure> {
    let d = ChainConfig::default();
    let c = ChainConfig {
        n_chains: file.pick(a.chains, "chains", d.n_chains)?,
        n_iter: file.pick(a.iter, "iter", d.n_iter)?,
        burn_in: file.pick(a.burnin, "burnin", d.burn_in)?,
        thin: file.pick(a.thin, "thin", d.thin)?,
        master_seed: file.pick(a.seed, "seed", d.master_seed)?,
        theta_steps: file.pick(None, "theta_steps", d.theta_steps)?,
        ..d
    };
    check_chain(&c)?;
    let horizon = file.pick(a.horizon, "horizon", DEFAULT_HORIZON)?;
    Ok((c, horizon))
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    chain: ChainArgs,
    /// Succeed even when some R-hat is at or above 1.1.
    #[arg(long)]
    no_strict: bool,
    #[arg(long)]
    out: PathBuf,
}

fn report_convergence(diag: &[ParamDiagnostic], strict: bool) -> Result<(), Failure> {
    let bad: Vec<&ParamDiagnostic> = diag.iter().filter(|d| !(d.rhat < RHAT_LIMIT)).collect();
    if bad.is_empty() {
        return Ok(());
    }
    let worst = bad.iter().max_by(|a, b| a.rhat.total_cmp(&b.rhat)).unwrap();
    let msg = format!(
        "{} parameter(s) with R-hat >= {RHAT_LIMIT}; worst {} at {:.3}",
        bad.len(),
        worst.name,
        worst.rhat
    );
    if strict {
        Err(Failure::Convergence(msg))
    } else {
        warn!("{msg}");
        Ok(())
    }
}

pub fn fit(a: FitArgs, file: &Settings) -> Result<(), Failure> {
    let keys: Vec<&str> = CHAIN_KEYS.iter().chain(&PREPROCESS_KEYS).copied().collect();
    file.restrict(&keys)?;
    let (chain, horizon) = chain_config(&a.chain, file)?;
    let ds = load_dataset(&a.data, file, chain.master_seed)?;
    let data = FitData::build(&ds.countries, &ds.observations, horizon)?;
    info!(
        "fitting {} observations in {} countries: {} chains x {} iterations",
        data.n_obs(),
        data.countries.len(),
        chain.n_chains,
        chain.n_iter
    );
    let draws = sampler::run(&chain, &data)?;
    write_fit_ready(&a.out, &ds.observations, &ds.countries)?;
    if let Some(audit) = &ds.audit {
        write_audit(create(&a.out.join(AUDIT_FILE))?, audit)?;
    }
    if let Some(p) = &ds.draws_file {
        fs::copy(p, a.out.join(U5MR_DRAWS_FILE)).map_err(|e| io_err(p, e))?;
    }
    fs::write(
        a.out.join(FIT_SETTINGS_FILE),
        format!(
            "horizon = {horizon:?}\nseed = {}\nchains = {}\niter = {}\nburnin = {}\nthin = {}\n",
            chain.master_seed, chain.n_chains, chain.n_iter, chain.burn_in, chain.thin
        ),
    )
    .map_err(|e| io_err(&a.out, e))?;
    sampler::write_draws(create(&a.out.join("draws.csv"))?, &draws)?;
    let diag = run_diagnose(&draws);
    sampler::write_diagnostics(create(&a.out.join("diagnostics.csv"))?, &diag)?;
    report_convergence(&diag, !a.no_strict)
}

/// Everything `estimate` and `diagnose` need from a fit directory.
struct FitDir {
    countries: Vec<CountryInput>,
    observations: Vec<Observation>,
    data: FitData,
    draws: PosteriorDraws,
}

fn load_fit(dir: &Path) -> Result<FitDir, Failure> {
    let sp = dir.join(FIT_SETTINGS_FILE);
    require(&sp)?;
    let text = fs::read_to_string(&sp).map_err(|e| io_err(&sp, e))?;
    let m = nmr_core::config::parse_key_values(&text)?;
    let horizon: f64 = nmr_core::config::lookup(&m, "horizon")?.unwrap_or(DEFAULT_HORIZON);
    let observations = load_observations(&dir.join(OBS_FILE))?;
    let mut countries = load_countries(&dir.join(COUNTRY_FILE))?;
    let dp = dir.join(U5MR_DRAWS_FILE);
    if dp.exists() {
        load_u5mr_draws(&dp, &mut countries)?;
    }
    let data = FitData::build(&countries, &observations, horizon)?;
    let drp = dir.join("draws.csv");
    require(&drp)?;
    let draws = sampler::read_draws(File::open(&drp).map_err(|e| io_err(&drp, e))?)?;
    let layout: Vec<(String, usize)> = data
        .countries
        .iter()
        .map(|c| (c.country_id.clone(), c.k()))
        .collect();
    if parameter_names(&layout) != draws.names {
        return Err(Failure::Data(format!(
            "{} does not match the data in {}",
            drp.display(),
            dir.display()
        )));
    }
    Ok(FitDir {
        countries,
        observations,
        data,
        draws,
    })
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Write one SVG chart per country.
    #[arg(long)]
    plots: bool,
    /// Also write draw-level NMR trajectories.
    #[arg(long)]
    trajectories: bool,
    /// Increment scale for countries without data: `recipe` or `model`.
    #[arg(long)]
    no_data_scale: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_scale(s: &str) -> Result<NoDataScale, Failure> {
    match s {
        "recipe" => Ok(NoDataScale::Recipe),
        "model" => Ok(NoDataScale::ModelConsistent),
        _ => Err(Failure::Usage(format!(
            "no_data_scale must be 'recipe' or 'model', got '{s}'"
        ))),
    }
}

fn estimate_config(
    file: &Settings,
    seed: Option<u64>,
    scale: Option<String>,
    horizon: f64,
) -> Result<EstimateConfig, Failure> {
    let scale: String = file.pick(scale, "no_data_scale", "recipe".into())?;
    Ok(EstimateConfig {
        horizon,
        seed: file.pick(seed, "seed", 1)?,
        no_data_scale: parse_scale(&scale)?,
        ..Default::default()
    })
}

pub fn estimate(a: EstimateArgs, file: &Settings) -> Result<(), Failure> {
    file.restrict(&["seed", "no_data_scale"])?;
    let fd = load_fit(&a.fit)?;
    let config = estimate_config(file, a.seed, a.no_data_scale.clone(), fd.data.horizon)?;
    let grids = estimate_all(&fd.countries, &fd.data, &fd.draws, &config)?;
    make_dir(&a.out)?;
    write_estimates(create(&a.out.join("estimates.csv"))?, &grids)?;
    write_outliers(create(&a.out.join("outliers.csv"))?, &grids)?;
    if a.trajectories {
        write_trajectories(create(&a.out.join("trajectories.csv"))?, &grids)?;
    }
    if a.plots {
        let dir = a.out.join("plots");
        make_dir(&dir)?;
        for (g, c) in grids.iter().zip(&fd.countries) {
            let obs: Vec<&Observation> = fd
                .observations
                .iter()
                .filter(|o| o.country_id == c.country_id)
                .collect();
            let title = if c.name.is_empty() {
                c.country_id.clone()
            } else {
                format!("{} ({})", c.name, c.country_id)
            };
            let p = dir.join(format!("{}.svg", c.country_id));
            fs::write(&p, country_svg(g, &title, &obs)).map_err(|e| io_err(&p, e))?;
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of resampled left-out sets.
    #[arg(long)]
    sets: Option<usize>,
    #[command(flatten)]
    chain: ChainArgs,
    #[arg(long)]
    out: PathBuf,
}

pub fn validate(a: ValidateArgs, file: &Settings) -> Result<(), Failure> {
    let keys: Vec<&str> = CHAIN_KEYS
        .iter()
        .chain(&PREPROCESS_KEYS)
        .chain(&["sets", "no_data_scale"])
        .copied()
        .collect();
    file.restrict(&keys)?;
    let (chains, horizon) = chain_config(&a.chain, file)?;
    let sets = file.pick(a.sets, "sets", 100)?;
    if sets == 0 {
        return Err(Failure::Usage("--sets must be at least 1".into()));
    }
    let ds = load_dataset(&a.data, file, chains.master_seed)?;
    let config = ValidationConfig {
        seed: chains.master_seed,
        estimate: estimate_config(file, Some(chains.master_seed), None, horizon)?,
        chains,
        n_sets: sets,
        horizon,
    };
    let out = run_validation(&ds.countries, &ds.observations, &config)?;
    make_dir(&a.out)?;
    write_report(create(&a.out.join("validation_report.csv"))?, &out.report)?;
    write_predictions(
        create(&a.out.join("left_out_predictions.csv"))?,
        &out.predictions,
    )?;
    for (name, draws) in [("training", &out.training_draws), ("full", &out.full_draws)] {
        let diag = run_diagnose(draws);
        sampler::write_diagnostics(
            create(&a.out.join(format!("diagnostics_{name}.csv")))?,
            &diag,
        )?;
        report_convergence(&diag, false)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    no_strict: bool,
    /// Output file; defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn diagnose(a: DiagnoseArgs, file: &Settings) -> Result<(), Failure> {
    file.restrict(&[])?;
    let drp = a.fit.join("draws.csv");
    require(&drp)?;
    let draws = sampler::read_draws(File::open(&drp).map_err(|e| io_err(&drp, e))?)?;
    let diag = run_diagnose(&draws);
    match &a.out {
        Some(p) => sampler::write_diagnostics(create(p)?, &diag)?,
        None => sampler::write_diagnostics(std::io::stdout().lock(), &diag)?,
    }
    report_convergence(&diag, !a.no_strict)
}

#[derive(Debug, Args)]
pub struct CrisisArgs {
    /// Under-five crisis deaths for a single calculation.
    #[arg(long, requires = "births", conflicts_with_all = ["countries", "crisis"])]
    deaths: Option<f64>,
    #[arg(long)]
    births: Option<f64>,
    /// Countries file whose births and crisis adjustments are used and updated.
    #[arg(long, requires_all = ["crisis", "out"])]
    countries: Option<PathBuf>,
    /// Crisis deaths: `country_id, year, deaths`.
    #[arg(long)]
    crisis: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn crisis(a: CrisisArgs, file: &Settings) -> Result<(), Failure> {
    file.restrict(&[])?;
    if let (Some(d), Some(b)) = (a.deaths, a.births) {
        println!("{:?}", crisis_nmr_adjustment(d, b)?);
        return Ok(());
    }
    let (Some(cp), Some(kp), Some(out)) = (a.countries, a.crisis, a.out) else {
        return Err(Failure::Usage(
            "give --deaths and --births, or --countries, --crisis and --out".into(),
        ));
    };
    require(&cp)?;
    require(&kp)?;
    let mut countries = load_countries(&cp)?;
    let mut rdr = csv::Reader::from_path(&kp).map_err(|e| io_err(&kp, e))?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(&kp, e))?;
        let bad = || Failure::Data(format!("{}: malformed row {:?}", kp.display(), rec));
        let id = rec.get(0).ok_or_else(bad)?;
        let year: i32 = rec
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(bad)?;
        let deaths: f64 = rec
            .get(2)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(bad)?;
        let c = countries
            .iter_mut()
            .find(|c| c.country_id == id)
            .ok_or_else(|| Failure::Data(format!("crisis deaths for unknown country '{id}'")))?;
        let births = *c
            .births
            .get(&year)
            .ok_or_else(|| Failure::Data(format!("no births for {id} in {year}")))?;
        *c.crisis_adjustments.entry(year).or_insert(0.0) += crisis_nmr_adjustment(deaths, births)?;
    }
    save_countries(&out, &countries)?;
    Ok(())
}
