//! Command-line interface: simulate, fit, select, and bench, all driven by a
//! single strictly-parsed config file with `--set` overrides.

mod config;
mod svg;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

use config::{load_config, parse_stats, PolicyName, RunConfig};
use dem_core::estimator::{fit_stream, DemFit};
use dem_core::event_data::{CovariateTable, EventStream, RiskSetPolicy};
use dem_core::experiments as exp;
use dem_core::inference::{alpha_covariance, effect_table, greedy_select};
use dem_core::model::{ModelSpec, SubModelSpec};
use dem_core::oracle::Lcg;
use dem_core::simulator::{derive_seed, simulate, SimConfig, SubModelParams};

#[derive(Parser)]
#[command(name = "dem", version, about = "Durational event models: fit, simulate, select, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an event stream from configured model parameters.
    Simulate(RunArgs),
    /// Fit both sub-models to an events file.
    Fit(RunArgs),
    /// Greedy forward model selection.
    Select(RunArgs),
    /// Simulation studies and the method benchmark.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Internal: isolated benchmark fit worker (stdin JSON -> stdout JSON).
    #[command(hide = true)]
    BenchWorker,
}

#[derive(Subcommand)]
enum BenchKind {
    /// Parameter recovery, coverage, and greedy selection accuracy.
    Recovery(RunArgs),
    /// Estimation error across a grid of actor counts.
    Scaling(RunArgs),
    /// Wall time and peak memory: block-coordinate vs Newton-Raphson.
    Speed(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Path to the run config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set study.replicates=20
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BenchWorker => {
            dem_core::experiments::worker_main()?;
            Ok(())
        }
        Command::Simulate(args) => with_config(args, "simulate", cmd_simulate),
        Command::Fit(args) => with_config(args, "fit", cmd_fit),
        Command::Select(args) => with_config(args, "select", cmd_select),
        Command::Bench { kind } => match kind {
            BenchKind::Recovery(args) => with_config(args, "bench recovery", cmd_bench_recovery),
            BenchKind::Scaling(args) => with_config(args, "bench scaling", cmd_bench_scaling),
            BenchKind::Speed(args) => with_config(args, "bench speed", cmd_bench_speed),
        },
    }
}

fn with_config(args: RunArgs, command: &str, body: fn(&RunConfig, &Ctx) -> Result<()>) -> Result<()> {
    let (config, canonical) = load_config(&args.config, &args.sets)?;
    let threads = config.resolve_threads();
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    let out_dir = config.output_dir();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let ctx = Ctx {
        out_dir,
        command: command.to_string(),
        config_sha256: hex(&Sha256::digest(canonical.as_bytes())),
        threads,
    };
    body(&config, &ctx)?;
    ctx.write_provenance(&config)?;
    Ok(())
}

struct Ctx {
    out_dir: PathBuf,
    command: String,
    config_sha256: String,
    threads: usize,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(())
    }

    /// Timestamps live only here, so every other output is byte-reproducible.
    fn write_provenance(&self, config: &RunConfig) -> Result<()> {
        let unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let body = format!(
            "command = {:?}\nconfig_sha256 = {:?}\nseed = {:?}\nlibrary_version = {:?}\nthreads = {}\ntimestamp_unix = {}\n",
            self.command,
            self.config_sha256,
            config.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
            env!("CARGO_PKG_VERSION"),
            self.threads,
            unix
        );
        std::fs::write(self.path("provenance.toml"), body)?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// simulate

fn build_sim_config(config: &RunConfig) -> Result<(SimConfig, CovariateTable)> {
    let sim = config.sim.as_ref().context("config needs a [sim] section")?;
    let seed = config.require_seed()?;
    let policy = sim.policy.unwrap_or(PolicyName::Unrestricted).to_policy();

    // Synthetic covariates from a dedicated seed stream; a covariates file,
    // when given, wins.
    let mut covs = CovariateTable::new(sim.n_actors);
    let mut rng = Lcg(derive_seed(seed, u64::MAX - 7));
    for name in &sim.covariates.standard_normal {
        covs.insert_continuous(name, (0..sim.n_actors).map(|_| rng.normal()).collect());
    }
    for cat in &sim.covariates.categorical {
        covs.insert_categorical(
            &cat.name,
            (0..sim.n_actors).map(|_| rng.below(cat.levels) as i64).collect(),
        );
    }
    if let Some(data) = &config.data {
        if let Some(path) = &data.covariates {
            let file = std::fs::File::open(path)
                .with_context(|| format!("opening covariates {}", path.display()))?;
            covs = CovariateTable::parse_csv(std::io::BufReader::new(file), sim.n_actors)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
        }
    }

    let build_sub = |sub: &config::SimSubSection, name: &str| -> Result<SubModelParams> {
        let baseline = sub.change_points.build(sim.window_end)?;
        let beta = match (&sub.beta_per_actor, sub.beta) {
            (Some(v), _) => {
                if v.len() != sim.n_actors {
                    bail!("{name}: beta_per_actor length {} != n_actors {}", v.len(), sim.n_actors);
                }
                v.clone()
            }
            (None, Some(b)) => vec![b; sim.n_actors],
            (None, None) => bail!("{name}: need `beta` or `beta_per_actor`"),
        };
        Ok(SubModelParams {
            stats: parse_stats(&sub.stats)?,
            alpha: sub.alpha.clone(),
            beta,
            baseline,
            gamma: sub.gamma.clone(),
        })
    };
    let cfg = SimConfig {
        n_actors: sim.n_actors,
        window_end: sim.window_end,
        incidence: build_sub(&sim.incidence, "sim.incidence")?,
        duration: sim.duration.as_ref().map(|d| build_sub(d, "sim.duration")).transpose()?,
        policy,
        seed,
        max_events: sim.max_events,
    };
    Ok((cfg, covs))
}

fn cmd_simulate(config: &RunConfig, ctx: &Ctx) -> Result<()> {
    let (cfg, covs) = build_sim_config(config)?;
    let out = simulate(&cfg, &covs).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut csv = Vec::new();
    out.stream.write_csv(&mut csv)?;
    let csv = String::from_utf8(csv).expect("ascii csv");
    ctx.write("events.csv", &csv)?;

    // Export the covariates alongside so the stream can be refit as-is.
    let sim = config.sim.as_ref().expect("checked in build_sim_config");
    if !sim.covariates.standard_normal.is_empty() || !sim.covariates.categorical.is_empty() {
        let mut cov_csv = String::from("actor,name,value\n");
        for name in &sim.covariates.standard_normal {
            for (a, v) in covs.continuous(name).expect("generated").iter().enumerate() {
                cov_csv.push_str(&format!("{a},{name},{v}\n"));
            }
        }
        for cat in &sim.covariates.categorical {
            for (a, v) in covs.categorical(&cat.name).expect("generated").iter().enumerate() {
                cov_csv.push_str(&format!("{a},{},{v}\n", cat.name));
            }
        }
        ctx.write("covariates.csv", &cov_csv)?;
    }
    if out.budget_exhausted {
        eprintln!("warning: event budget exhausted; stream truncated");
    }
    if out.rate_underflow_windows > 0 {
        eprintln!("warning: total rate underflowed in {} window(s)", out.rate_underflow_windows);
    }
    // Validate the written file by re-parsing it.
    let file = std::fs::File::open(ctx.path("events.csv"))?;
    EventStream::parse_events_reader(
        std::io::BufReader::new(file),
        Some(cfg.window_end),
        false,
        cfg.rem_mode(),
    )
    .map_err(|e| anyhow::anyhow!("self-validation of events.csv failed: {e}"))?;
    println!(
        "simulated {} events ({} transitions) over [0, {}]",
        out.stream.events().len(),
        out.transitions,
        cfg.window_end
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

struct LoadedData {
    stream: EventStream,
    covs: CovariateTable,
    spec: ModelSpec,
}

fn load_data_and_model(config: &RunConfig) -> Result<LoadedData> {
    let data = config.data.as_ref().context("config needs a [data] section")?;
    let model = config.model.as_ref().context("config needs a [model] section")?;
    if model.rem && !model.duration.is_empty() {
        bail!("point-event (rem) mode admits no duration statistics");
    }
    let (stream, summary) =
        EventStream::parse_events(&data.events, data.window_end, data.remap_actors, model.rem)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    println!(
        "ingested {} events ({} censored) among {} actors; window [0, {}], origin shifted by {}",
        summary.n_events, summary.n_censored, summary.n_actors, summary.window_end, summary.time_shift
    );
    let covs = match &data.covariates {
        Some(path) => {
            let file = std::fs::File::open(path)
                .with_context(|| format!("opening covariates {}", path.display()))?;
            CovariateTable::parse_csv(std::io::BufReader::new(file), stream.n_actors)
                .map_err(|e| anyhow::anyhow!("{e}"))?
        }
        None => CovariateTable::new(stream.n_actors),
    };
    let baseline = model.change_points.build(stream.window_end)?;
    let policy = model.policy.unwrap_or(PolicyName::Unrestricted).to_policy();
    if policy == RiskSetPolicy::ExclusiveEngagement && !model.rem {
        stream
            .validate_policy(policy)
            .map_err(|e| anyhow::anyhow!("data violates the exclusive-engagement policy: {e}"))?;
    }
    let spec = ModelSpec {
        incidence: SubModelSpec { stats: parse_stats(&model.incidence)?, baseline: baseline.clone() },
        duration: if model.rem {
            None
        } else {
            Some(SubModelSpec { stats: parse_stats(&model.duration)?, baseline })
        },
        policy,
    };
    spec.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(LoadedData { stream, covs, spec })
}

fn write_fit_outputs(ctx: &Ctx, spec: &ModelSpec, fit: &DemFit) -> Result<()> {
    let mut sides: Vec<(&str, &dem_core::estimator::SubModelFit, &SubModelSpec)> =
        vec![("incidence", &fit.incidence, &spec.incidence)];
    if let (Some(d), Some(ds)) = (&fit.duration, &spec.duration) {
        sides.push(("duration", d, ds));
    }
    for (side, sub, sub_spec) in sides {
        let cov = alpha_covariance(&sub.grid, &sub.result.theta).map_err(|e| anyhow::anyhow!("{e}"))?;
        let rows = effect_table(&sub_spec.stats, &sub.result.theta.alpha, &cov);
        let mut coeff = String::from("stat,alpha,se,z,exp_alpha,two_pow_alpha\n");
        for r in &rows {
            coeff.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
                r.stat,
                r.alpha,
                r.se,
                r.z,
                r.exp_alpha,
                r.two_pow_alpha.map(|v| format!("{v:.9e}")).unwrap_or_default()
            ));
        }
        ctx.write(&format!("coefficients_{side}.csv"), &coeff)?;

        let gamma_orig = sub.grid.gamma_per_original_piece(&sub.result.theta.gamma);
        let mut baseline = String::from("t_lo,t_hi,gamma\n");
        for (q, g) in gamma_orig.iter().enumerate() {
            let (lo, hi) = sub_spec.baseline.piece_bounds(q);
            baseline.push_str(&format!("{lo},{hi},{g:.9e}\n"));
        }
        ctx.write(&format!("baseline_{side}.csv"), &baseline)?;

        let mut pop = String::from("actor,beta\n");
        for (a, b) in sub.result.theta.beta.iter().enumerate() {
            pop.push_str(&format!("{a},{b:.9e}\n"));
        }
        ctx.write(&format!("popularity_{side}.csv"), &pop)?;

        let mut log = String::from("iteration,log_likelihood\n");
        for (k, ll) in sub.result.ll_trace.iter().enumerate() {
            log.push_str(&format!("{k},{ll:.9e}\n"));
        }
        log.push_str(&format!(
            "# converged={} iterations={} wall_seconds={:.3} peak_rss_bytes={} floored_actors={}\n",
            sub.result.converged,
            sub.result.iterations,
            sub.result.wall_time,
            sub.result.peak_memory,
            sub.result.floored_actors.len()
        ));
        ctx.write(&format!("convergence_{side}.log"), &log)?;
    }
    Ok(())
}

fn cmd_fit(config: &RunConfig, ctx: &Ctx) -> Result<()> {
    let loaded = load_data_and_model(config)?;
    let fit_section = config.fit.clone().unwrap_or_default();
    let opts = fit_section.to_options();
    let fit = fit_stream(&loaded.stream, &loaded.covs, &loaded.spec, &opts, fit_section.engine())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    for (side, sub) in
        std::iter::once(("incidence", &fit.incidence)).chain(fit.duration.iter().map(|d| ("duration", d)))
    {
        println!(
            "{side}: ll = {:.4}, iterations = {}, converged = {}",
            sub.result.final_ll(),
            sub.result.iterations,
            sub.result.converged
        );
        if !sub.result.converged {
            eprintln!("warning: {side} fit did not converge within max_iter");
        }
    }
    write_fit_outputs(ctx, &loaded.spec, &fit)
}

// ---------------------------------------------------------------------------
// select

fn cmd_select(config: &RunConfig, ctx: &Ctx) -> Result<()> {
    let loaded = load_data_and_model(config)?;
    let select = config.select.as_ref().context("config needs a [select] section")?;
    let fit_section = config.fit.clone().unwrap_or_default();
    let outcome = greedy_select(
        &loaded.stream,
        &loaded.covs,
        &loaded.spec,
        &parse_stats(&select.incidence_candidates)?,
        &parse_stats(&select.duration_candidates)?,
        &fit_section.to_options(),
        select.criterion.to_flavor(),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut trace = String::from("sub_model,stats,criterion,accepted,error\n");
    for step in &outcome.trace {
        trace.push_str(&format!(
            "{},{},{},{},{}\n",
            match step.sub_model {
                dem_core::event_data::TransitionKind::Formation => "incidence",
                dem_core::event_data::TransitionKind::Dissolution => "duration",
            },
            step.stats.join("+"),
            if step.criterion.is_nan() { "nan".into() } else { format!("{:.9e}", step.criterion) },
            step.accepted,
            step.error.clone().unwrap_or_default().replace(',', ";")
        ));
    }
    ctx.write("selection_trace.csv", &trace)?;

    let selected = format!(
        "incidence = [{}]\nduration = [{}]\n",
        outcome
            .spec
            .incidence
            .stats
            .iter()
            .map(|s| format!("{:?}", s.to_string()))
            .collect::<Vec<_>>()
            .join(", "),
        outcome
            .spec
            .duration
            .as_ref()
            .map(|d| d.stats.iter().map(|s| format!("{:?}", s.to_string())).collect::<Vec<_>>().join(", "))
            .unwrap_or_default()
    );
    ctx.write("selected_model.toml", &selected)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

fn cmd_bench_recovery(config: &RunConfig, ctx: &Ctx) -> Result<()> {
    let study = config.study.clone().unwrap_or_default();
    let cfg = exp::RecoveryConfig {
        n_actors: study.n_actors,
        replicates: study.replicates,
        window_end: study.window_end,
        n_pieces: study.n_pieces,
        seed: config.require_seed()?,
        select: study.select,
        fit: config.fit.clone().unwrap_or_default().to_options(),
        aic: config
            .select
            .as_ref()
            .map(|s| s.criterion.to_flavor())
            .unwrap_or(dem_core::inference::AicFlavor::Standard),
    };
    let report = exp::run_recovery_study(&cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
    ctx.write("recovery.csv", &exp::recovery_csv(&report))?;
    ctx.write("recovery_qq.csv", &exp::qq_csv(&report.z_pool))?;
    if study.svg {
        let mut sorted = report.z_pool.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let points: Vec<(f64, f64)> = sorted
            .iter()
            .enumerate()
            .map(|(k, &z)| (exp::normal_quantile((k as f64 + 0.5) / n as f64), z))
            .collect();
        let chart = svg::qq_chart(
            "standardized estimation errors vs normal quantiles",
            &[svg::Series { label: "pooled z", points }],
        );
        ctx.write("recovery_qq.svg", &chart)?;
    }
    println!(
        "recovery: {} replicates used ({} failed), selection {}/{} correct, {:.1}s",
        report.replicates_used,
        report.replicates_failed,
        report.selection_correct,
        report.selection_total,
        report.wall_seconds
    );
    Ok(())
}

fn cmd_bench_scaling(config: &RunConfig, ctx: &Ctx) -> Result<()> {
    let study = config.study.clone().unwrap_or_default();
    let cfg = exp::ScalingConfig {
        n_grid: study.n_grid.clone(),
        replicates: study.scaling_replicates,
        window_end: study.window_end,
        n_pieces: study.n_pieces,
        seed: config.require_seed()?,
        fit: config.fit.clone().unwrap_or_default().to_options(),
    };
    let report = exp::run_scaling_study(&cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
    ctx.write("scaling.csv", &exp::scaling_csv(&report))?;
    if study.svg {
        for side in ["incidence", "duration"] {
            let series: Vec<svg::Series> = [
                ("alpha", (|r: &exp::ScalingRow| r.alpha_rmse) as fn(&exp::ScalingRow) -> f64),
                ("beta", |r| r.beta_rmse),
                ("gamma", |r| r.gamma_rmse),
            ]
            .into_iter()
            .map(|(label, f)| svg::Series {
                label,
                points: report
                    .rows
                    .iter()
                    .filter(|r| r.sub_model == side)
                    .map(|r| (r.n_actors as f64, f(r)))
                    .collect(),
            })
            .collect();
            let chart =
                svg::line_chart(&format!("estimation error vs actors ({side})"), "actors", "rmse", &series);
            ctx.write(&format!("scaling_{side}.svg"), &chart)?;
        }
    }
    println!("scaling: {} rows, {:.1}s", report.rows.len(), report.wall_seconds);
    Ok(())
}

fn cmd_bench_speed(config: &RunConfig, ctx: &Ctx) -> Result<()> {
    let study = config.study.clone().unwrap_or_default();
    let cfg = exp::BenchConfig {
        n_grid: study.n_grid.clone(),
        window_end: study.bench_window_end,
        n_pieces: study.bench_n_pieces,
        seed: config.require_seed()?,
        mem_guard_bytes: (study.mem_guard_gb * (1u64 << 30) as f64) as u64,
        fit: config.fit.clone().unwrap_or_default().to_options(),
        beta_inc: study.bench_beta,
        worker: exp::WorkerSpawn::CurrentExe { prefix_args: vec!["bench-worker".into()] },
    };
    let report = exp::run_benchmark(&cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
    ctx.write("speed.csv", &exp::bench_csv(&report))?;
    if study.svg {
        for (name, f) in [
            ("time", (|r: &exp::BenchRow| r.wall_seconds) as fn(&exp::BenchRow) -> f64),
            ("memory", |r| r.peak_bytes as f64),
        ] {
            let series: Vec<svg::Series> = ["block_coordinate", "newton_raphson"]
                .into_iter()
                .map(|engine| svg::Series {
                    label: engine,
                    points: report
                        .rows
                        .iter()
                        .filter(|r| r.engine == engine && !r.infeasible)
                        .map(|r| (r.n_actors as f64, f(r)))
                        .collect(),
                })
                .collect();
            let chart = svg::line_chart(&format!("fit {name} vs actors"), "actors", name, &series);
            ctx.write(&format!("speed_{name}.svg"), &chart)?;
        }
    }
    for r in &report.rows {
        if r.infeasible {
            println!("N={} {}: infeasible ({})", r.n_actors, r.engine, r.note);
        } else {
            println!(
                "N={} {}: {:.3}s, peak {:.1} MiB",
                r.n_actors,
                r.engine,
                r.wall_seconds,
                r.peak_bytes as f64 / (1 << 20) as f64
            );
        }
    }
    Ok(())
}
