use anyhow::{bail, Result};
use aqx_cli::config::{parse_eps_list, parse_sweep, parse_vector, RunConfig};
use aqx_cli::report::{self, out_path, write_csv, write_json, Report};
use aqx_cli::verify;
use aqx_core::homogenize::{self, EhomOutcome, FieldClass, FieldClassInput};
use aqx_core::projection;
use aqx_core::spectral::{aqxf, hneg_norm, lp_norm};
use aqx_core::twoscale;
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "aqx", version, about = "spectral toolkit for differential-constraint envelopes, cell problems and two-scale diagnostics")]
struct Cli {
    /// cap the worker pool
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the constant-rank condition over sample sweeps
    Rank {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project a field onto the constraint kernel at a frozen point
    Project {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Envelope value at (x, xi), or over a sweep grid of xi
    Envelope {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        xi: Option<String>,
        /// per-axis sweep "lo:hi:n,lo:hi:n"
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Homogenized density trace over the dyadic oscillation scales
    Fhom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        xi: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Homogenized functional of the macro field declared in the config
    Ehom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unfolding, sequence generation and two-scale residual diagnostics
    Twoscale {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        eps: Option<String>,
        /// macro field for `unfold` (defaults to the config [fields] u)
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirical relaxation identity check
    Relaxcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the acceptance suite
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> i32 {
    use aqx_core::Error as E;
    if let Some(core) = err.downcast_ref::<E>() {
        return match core {
            E::ConstantRankViolation { .. } | E::RankDeficiencyDrift { .. } => 2,
            E::Syntax { .. }
            | E::UnknownIdentifier { .. }
            | E::InvalidGrid { .. }
            | E::InvalidExponent { .. }
            | E::ShapeMismatch { .. }
            | E::Format(_)
            | E::Io(_) => 1,
            _ => 3,
        };
    }
    1
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn load(config: &PathBuf, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let seed_override = cli.seed;
    match cli.command {
        Command::Rank { config, out } => {
            let cfg = load(&config, seed_override)?;
            let op = cfg.operator()?;
            let (xs, ls) = op.default_rank_samples(cfg.rank.x_samples, cfg.rank.lambda_samples);
            let rank_report = op.check_constant_rank(&xs, &ls)?;
            if rank_report.declared_mismatch {
                eprintln!(
                    "note: computed rank {} differs from the declared rank {:?}",
                    rank_report.rank, rank_report.declared_rank
                );
            }
            println!("rank: {}", rank_report.rank);
            if let Some(path) = out {
                write_json(
                    &out_path(&path),
                    &Report {
                        header: report::header(&config.display().to_string(), cfg.seed),
                        body: rank_report,
                    },
                )?;
            }
            Ok(())
        }
        Command::Project {
            config,
            input,
            x,
            out,
            report: report_path,
        } => {
            let cfg = load(&config, seed_override)?;
            let op = cfg.operator()?;
            let x = parse_vector(&x, cfg.dimensions.n)?;
            let psi = aqxf::read_field(&input)?;
            let (proj, proj_report) = projection::project_with_report(&op, &x, &psi)?;
            aqxf::write_field(&out_path(&out), &proj)?;
            if let Some(path) = report_path {
                write_json(
                    &out_path(&path),
                    &Report {
                        header: report::header(&config.display().to_string(), cfg.seed),
                        body: proj_report,
                    },
                )?;
            }
            Ok(())
        }
        Command::Envelope {
            config,
            x,
            xi,
            sweep,
            out,
        } => {
            let cfg = load(&config, seed_override)?;
            let op = cfg.operator()?;
            let f = cfg.integrand()?;
            let x = parse_vector(&x, cfg.dimensions.n)?;
            let opts = cfg.solver_options();
            let micro = cfg.grids.micro_dims.clone();

            #[derive(Serialize)]
            struct PointResult {
                xi: Vec<f64>,
                value: f64,
                iterations: usize,
                grad_norm: f64,
                starts: Vec<aqx_core::envelope::StartRecord>,
                minimizer: Option<String>,
            }
            #[derive(Serialize)]
            struct EnvelopeBody {
                x: Vec<f64>,
                micro: Vec<usize>,
                points: Vec<PointResult>,
            }

            let mut points = Vec::new();
            match (&xi, &sweep) {
                (Some(xi), None) => {
                    let xi = parse_vector(xi, cfg.dimensions.d)?;
                    let r = aqx_core::envelope::qa_envelope(&op, &f, &x, &xi, &micro, &opts)?;
                    let min_path = out_path(&out).with_extension("minimizer.aqxf");
                    aqxf::write_field(&min_path, &r.minimizer)?;
                    points.push(PointResult {
                        xi,
                        value: r.value,
                        iterations: r.iterations,
                        grad_norm: r.grad_norm,
                        starts: r.starts,
                        minimizer: Some(min_path.display().to_string()),
                    });
                }
                (None, Some(sweep)) => {
                    let axes = parse_sweep(sweep)?;
                    if axes.len() != cfg.dimensions.d {
                        bail!("sweep needs {} axes", cfg.dimensions.d);
                    }
                    let mut xis = vec![vec![]];
                    for axis in &axes {
                        let mut next = Vec::new();
                        for partial in &xis {
                            for &v in axis {
                                let mut p: Vec<f64> = partial.clone();
                                p.push(v);
                                next.push(p);
                            }
                        }
                        xis = next;
                    }
                    let results: Vec<_> = xis
                        .par_iter()
                        .map(|xi| aqx_core::envelope::qa_envelope(&op, &f, &x, xi, &micro, &opts))
                        .collect::<aqx_core::Result<Vec<_>>>()?;
                    for (xi, r) in xis.into_iter().zip(results) {
                        points.push(PointResult {
                            xi,
                            value: r.value,
                            iterations: r.iterations,
                            grad_norm: r.grad_norm,
                            starts: r.starts,
                            minimizer: None,
                        });
                    }
                }
                _ => bail!("pass exactly one of --xi or --sweep"),
            }
            write_json(
                &out_path(&out),
                &Report {
                    header: report::header(&config.display().to_string(), cfg.seed),
                    body: EnvelopeBody {
                        x,
                        micro,
                        points,
                    },
                },
            )?;
            Ok(())
        }
        Command::Fhom {
            config,
            x,
            xi,
            out,
            csv,
        } => {
            let cfg = load(&config, seed_override)?;
            let op = cfg.operator()?;
            let f = cfg.integrand()?;
            let x = parse_vector(&x, cfg.dimensions.n)?;
            let xi = parse_vector(&xi, cfg.dimensions.d)?;
            let opts = cfg.solver_options();
            let trace = homogenize::fhom(
                &op,
                &f,
                &x,
                &xi,
                cfg.homogenize.n_max,
                &cfg.grids.micro_dims,
                &opts,
            )?;

            #[derive(Serialize)]
            struct FhomBody {
                x: Vec<f64>,
                xi: Vec<f64>,
                n_list: Vec<usize>,
                values: Vec<f64>,
                fhom_estimate: f64,
            }
            if let Some(path) = csv {
                let rows: Vec<Vec<f64>> = trace
                    .n_list
                    .iter()
                    .zip(&trace.values)
                    .map(|(&n, &v)| vec![n as f64, v, 0.0])
                    .collect();
                write_csv(&out_path(&path), &["n", "value", "residual"], &rows)?;
            }
            write_json(
                &out_path(&out),
                &Report {
                    header: report::header(&config.display().to_string(), cfg.seed),
                    body: FhomBody {
                        x,
                        xi,
                        n_list: trace.n_list,
                        values: trace.values,
                        fhom_estimate: trace.fhom_estimate,
                    },
                },
            )?;
            Ok(())
        }
        Command::Ehom { config, out } => {
            let cfg = load(&config, seed_override)?;
            let op = cfg.operator()?;
            let f = cfg.integrand()?;
            let u = cfg.macro_field_u()?;
            let opts = cfg.solver_options();
            let outcome = homogenize::ehom(
                &op,
                &f,
                &u,
                cfg.homogenize.n_max,
                &cfg.grids.micro_dims,
                cfg.homogenize.membership_tol,
                &opts,
            )?;

            #[derive(Serialize)]
            struct EhomBody {
                feasible: bool,
                value: Option<f64>,
                macro_residual: Option<f64>,
                nodewise: Option<Vec<f64>>,
            }
            let body = match outcome {
                EhomOutcome::Infeasible(rep) => {
                    println!("infeasible: macro residual {:.3e}", rep.macro_residual);
                    EhomBody {
                        feasible: false,
                        value: None,
                        macro_residual: Some(rep.macro_residual),
                        nodewise: None,
                    }
                }
                EhomOutcome::Value { value, nodewise } => {
                    println!("value: {value:.9}");
                    EhomBody {
                        feasible: true,
                        value: Some(value),
                        macro_residual: None,
                        nodewise: Some(nodewise.values().to_vec()),
                    }
                }
            };
            write_json(
                &out_path(&out),
                &Report {
                    header: report::header(&config.display().to_string(), cfg.seed),
                    body,
                },
            )?;
            Ok(())
        }
        Command::Twoscale {
            config,
            mode,
            eps,
            input,
            out,
        } => {
            let cfg = load(&config, seed_override)?;
            let ks = match eps {
                Some(e) => parse_eps_list(&e)?,
                None => cfg.eps_list()?,
            };
            run_twoscale(&cfg, &config.display().to_string(), &mode, &ks, input, out)
        }
        Command::Relaxcheck { config, out, csv } => {
            let cfg = load(&config, seed_override)?;
            let op = cfg.operator()?;
            let f = cfg.integrand()?;
            if f.uses_y() {
                bail!("relaxcheck needs a y-independent integrand");
            }
            let u = cfg.macro_field_u()?;
            let ks = cfg.eps_list()?;
            let opts = cfg.solver_options();
            let micro = cfg
                .twoscale
                .micro_dims
                .clone()
                .unwrap_or_else(|| cfg.grids.micro_dims.clone());
            let report_body = homogenize::relaxation_check(
                &op,
                &f,
                &u,
                &ks,
                &micro,
                cfg.homogenize.membership_tol,
                &opts,
            )?;
            if let Some(path) = csv {
                let rows: Vec<Vec<f64>> = report_body
                    .rows
                    .iter()
                    .map(|r| vec![r.eps, r.energy, r.residual])
                    .collect();
                write_csv(&out_path(&path), &["eps", "value", "residual"], &rows)?;
            }
            write_json(
                &out_path(&out),
                &Report {
                    header: report::header(&config.display().to_string(), cfg.seed),
                    body: report_body,
                },
            )?;
            Ok(())
        }
        Command::Verify { config, out } => {
            let cfg = load(&config, seed_override)?;
            let outcome = verify::verify_suite(cfg.seed);
            print!("{}", verify::format_summary(&outcome));
            if let Some(path) = out {
                let mut hdr = report::header(&config.display().to_string(), cfg.seed);
                hdr.runtimes_s = Some(outcome.runtimes_s.iter().map(|(_, t)| *t).collect());
                write_json(
                    &out_path(&path),
                    &Report {
                        header: hdr,
                        body: outcome.body.clone(),
                    },
                )?;
            }
            if !outcome.body.all_pass {
                let failed: Vec<String> = outcome
                    .body
                    .criteria
                    .iter()
                    .filter(|c| !c.pass)
                    .map(|c| c.id.to_string())
                    .collect();
                bail!("criteria failed: {}", failed.join(", "));
            }
            Ok(())
        }
    }
}

fn run_twoscale(
    cfg: &RunConfig,
    config_name: &str,
    mode: &str,
    ks: &[usize],
    input: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let op = cfg.operator()?;
    match mode {
        "unfold" => {
            let u = match input {
                Some(path) => aqxf::read_field(&path)?,
                None => cfg.macro_field_u()?,
            };
            let rows = twoscale::unfold_convergence(&u, ks, cfg.twoscale.micro_dims.as_deref())?;
            #[derive(Serialize)]
            struct UnfoldBody {
                rows: Vec<(f64, f64)>,
                norm_u: f64,
            }
            write_json(
                &out_path(&out),
                &Report {
                    header: report::header(config_name, cfg.seed),
                    body: UnfoldBody {
                        norm_u: lp_norm(&u, 2.0)?,
                        rows,
                    },
                },
            )?;
            Ok(())
        }
        "generate" | "residual" => {
            let v = build_limit_field(cfg, &op)?;
            let bundle = twoscale::generate_sequence(&op, &v, ks, cfg.homogenize.membership_tol)?;
            #[derive(Serialize)]
            struct Row {
                eps: f64,
                constraint_residual: f64,
                weak_gap: Option<f64>,
                strong_gap: Option<f64>,
            }
            let mut rows: Vec<Row> = bundle
                .eps_inv
                .iter()
                .zip(&bundle.fields)
                .map(|(&k, u)| {
                    Ok(Row {
                        eps: 1.0 / k as f64,
                        constraint_residual: hneg_norm(&op.apply_a_macro(u)?),
                        weak_gap: None,
                        strong_gap: None,
                    })
                })
                .collect::<aqx_core::Result<Vec<_>>>()?;
            if mode == "residual" {
                let bank = default_bank(cfg);
                let res = twoscale::twoscale_residual(&bundle, &v, &bank)?;
                for (row, r) in rows.iter_mut().zip(res) {
                    row.weak_gap = Some(r.weak_gap);
                    row.strong_gap = Some(r.strong_gap);
                }
            }
            #[derive(Serialize)]
            struct GenerateBody {
                rows: Vec<Row>,
            }
            write_json(
                &out_path(&out),
                &Report {
                    header: report::header(config_name, cfg.seed),
                    body: GenerateBody { rows },
                },
            )?;
            Ok(())
        }
        other => bail!("unknown twoscale mode `{other}` (unfold|generate|residual)"),
    }
}

fn default_bank(cfg: &RunConfig) -> Vec<twoscale::BankFunction> {
    twoscale::default_test_bank(
        cfg.dimensions.n,
        cfg.dimensions.d,
        cfg.twoscale.bank_radius,
    )
}

/// Admissible two-scale limit from the config: the declared macro field plus
/// a projected random band-limited fluctuation.
fn build_limit_field(
    cfg: &RunConfig,
    op: &aqx_core::operator::OperatorSpec,
) -> Result<twoscale::TwoScaleField> {
    use aqx_core::spectral::{random_band_limited, PeriodicField};
    use rand::SeedableRng;
    let u = cfg.macro_field_u()?;
    let macro_grid = cfg.macro_grid();
    let micro_grid = aqx_core::spectral::Grid::new(
        cfg.twoscale
            .micro_dims
            .as_deref()
            .unwrap_or(&cfg.grids.micro_dims),
    )?;
    let d = cfg.dimensions.d;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(aqx_core::seed::derive(
        cfg.seed, "limit-field", &[], 0,
    ));
    let profiles = 6usize;
    let x_profiles: Vec<PeriodicField> = (0..profiles)
        .map(|_| random_band_limited(&macro_grid, 1, cfg.twoscale.x_band, 1.0, &mut rng))
        .collect();
    let y_profiles: Vec<PeriodicField> = (0..profiles)
        .map(|_| {
            random_band_limited(
                &micro_grid,
                d,
                cfg.twoscale.y_band,
                cfg.twoscale.amplitude,
                &mut rng,
            )
        })
        .collect();
    let mut psi = twoscale::TwoScaleField::zeros(macro_grid.clone(), micro_grid.clone(), d);
    for k in 0..macro_grid.len() {
        let mut slice = PeriodicField::zeros(micro_grid.clone(), d);
        for (xp, yp) in x_profiles.iter().zip(&y_profiles) {
            slice = slice.add_scaled(yp, xp.values()[k])?;
        }
        psi.set_micro_field(k, &slice)?;
    }
    let w = projection::project_two_scale(op, &psi.fluctuation())?;
    // verify the macro part is admissible before shifting it in
    let membership = homogenize::membership_check(
        op,
        &FieldClassInput::Macro(u.clone()),
        FieldClass::MacroFree,
        cfg.homogenize.membership_tol,
    )?;
    if !membership.pass {
        bail!(aqx_core::Error::Infeasible {
            residual: membership.macro_residual,
            tol: cfg.homogenize.membership_tol,
        });
    }
    let mut v = w;
    for k in 0..macro_grid.len() {
        let uk = u.node(k).to_vec();
        let shift = PeriodicField::from_fn(micro_grid.clone(), d, |_, out| {
            out.copy_from_slice(&uk);
        });
        let s = v.micro_field(k).add_scaled(&shift, 1.0)?;
        v.set_micro_field(k, &s)?;
    }
    Ok(v)
}
