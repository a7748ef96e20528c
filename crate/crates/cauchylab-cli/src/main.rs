//! Batch driver for the cauchylab experiments: every experiment is a
//! subcommand reading one TOML config, emitting deterministic artifacts with
//! provenance headers, and exiting 0 (clean), 2 (config or compute error), or
//! 3 (soft quality flag, tolerated under `--soft-fail-ok`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use serde_json::{json, Value};

use cauchylab::cauchy::{
    aperture, generate_cauchy_space, pair_norm, subspace_from_pairs, BoundaryMetric, CauchyPair,
};
use cauchylab::geometry::validate_chain;
use cauchylab::green::{asymptotics_report, green_column, ladder_radii, KernelStackBuilder};
use cauchylab::probes::{
    boundary_stability_probe, smallness_propagation_report, three_spheres_experiment,
    SingularKernel,
};
use cauchylab::stability::{
    reconstruct, stability_sweep, trace_csv, ReconstructConfig, StabilityError, SweepConfig,
};
use cauchylab::{AffineCoeff, DiscreteOperator, GridDomain, Impedance, NodeClass, C64};

mod config;
use config::{Overrides, ResolvedConfig};

#[derive(Parser)]
#[command(name = "cauchylab", version, about = "Stability experiments for piecewise-linear potentials from one-sided boundary data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the window-generation problem for one datum and dump the field.
    Forward(RunArgs),
    /// Green kernel checks: symmetry, layered-stack identity, far-field decay.
    #[command(name = "green-check")]
    GreenCheck(RunArgs),
    /// Aperture between the Cauchy spaces of the two configured potentials.
    Distance(RunArgs),
    /// Randomized sweep of potential pairs measuring the Lipschitz ratio.
    Sweep(RunArgs),
    /// Interface smallness ladder and first-interface boundary recovery.
    Probe(RunArgs),
    /// Three-spheres interpolation exponents of random solutions.
    #[command(name = "three-spheres")]
    ThreeSpheres(RunArgs),
    /// Scaled gradient descent on the data misfit, starting from potential2.
    Reconstruct(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML, nested tables).
    config: PathBuf,
    /// Override fixture.h (a float or a fraction like 1/12).
    #[arg(long = "h", value_name = "H")]
    h: Option<String>,
    /// Override run.m (generation count).
    #[arg(long)]
    m: Option<usize>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override output.dir.
    #[arg(long)]
    out: Option<String>,
    /// Override output.format (text or json).
    #[arg(long)]
    format: Option<String>,
    /// Exit 0 instead of 3 when only soft quality flags fired.
    #[arg(long = "soft-fail-ok")]
    soft_fail_ok: bool,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            h: self.h.clone(),
            m: self.m,
            seed: self.seed,
            out: self.out.clone(),
            format: self.format.clone(),
        }
    }
}

/// Failure taxonomy behind the exit codes: config and hard errors exit 2,
/// soft quality flags exit 3 (0 under `--soft-fail-ok`).
enum Failure {
    Config(String),
    Hard(String),
}

fn hard<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Hard(e.to_string())
}

/// What a subcommand hands back on success: human lines, a JSON summary
/// (provenance included), and any soft quality flags.
struct Outcome {
    text: Vec<String>,
    summary: Value,
    soft: Vec<String>,
}

/// Provenance block leading every artifact: the config hash pins the exact
/// resolved configuration, defaults included.
#[derive(Serialize)]
struct Provenance {
    config_sha256: String,
    seed: u64,
    grid: String,
    version: String,
    config: ResolvedConfig,
}

fn provenance(cfg: &ResolvedConfig, grid: String) -> Provenance {
    Provenance {
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        grid,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
    }
}

/// Comment header for text and CSV artifacts.
fn text_header(p: &Provenance) -> String {
    format!(
        "# config_sha256: {}\n# seed: {}\n# grid: {}\n# version: {}\n# config: {}\n",
        p.config_sha256,
        p.seed,
        p.grid,
        p.version,
        p.config.to_json_line()
    )
}

/// JSON artifact body: provenance object merged with the payload fields.
fn json_artifact(p: &Provenance, payload: Value) -> String {
    let mut s = serde_json::to_string_pretty(&compose(p, payload)).expect("artifact serializes");
    s.push('\n');
    s
}

/// Summary value with the provenance embedded under its own key.
fn compose(p: &Provenance, payload: Value) -> Value {
    let mut map = serde_json::Map::new();
    map.insert(
        "provenance".into(),
        serde_json::to_value(p).expect("provenance serializes"),
    );
    if let Value::Object(o) = payload {
        map.extend(o);
    }
    Value::Object(map)
}

fn write_artifact(cfg: &ResolvedConfig, name: &str, content: &str) -> Result<String, Failure> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::Hard(format!("output dir {}: {e}", cfg.out_dir)))?;
    let path = Path::new(&cfg.out_dir).join(name);
    fs::write(&path, content).map_err(|e| Failure::Hard(format!("{}: {e}", path.display())))?;
    Ok(path.display().to_string())
}

fn physical(cfg: &ResolvedConfig) -> Result<Arc<GridDomain>, Failure> {
    GridDomain::build_physical(&cfg.domain_spec())
        .map(Arc::new)
        .map_err(hard)
}

fn augmented(cfg: &ResolvedConfig) -> Result<Arc<GridDomain>, Failure> {
    GridDomain::build_augmented(&cfg.domain_spec())
        .map(Arc::new)
        .map_err(hard)
}

/// The window metric, with `run.m` checked against the mode count it carries.
fn window_metric(dom: &GridDomain, m: usize) -> Result<BoundaryMetric, Failure> {
    let metric = BoundaryMetric::from_domain(dom).map_err(hard)?;
    if m > metric.modes() {
        return Err(Failure::Config(format!(
            "run.m: window carries {} modes at this spacing, got {}",
            metric.modes(),
            m
        )));
    }
    Ok(metric)
}

fn require_potential2(cfg: &ResolvedConfig, who: &str) -> Result<(), Failure> {
    if cfg.potential2.is_none() {
        return Err(Failure::Config(format!(
            "potential2: required by the {who} subcommand"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

fn run_forward(cfg: &ResolvedConfig) -> Result<Outcome, Failure> {
    let dom = physical(cfg)?;
    let metric = BoundaryMetric::from_domain(&dom).map_err(hard)?;
    if cfg.datum >= metric.modes() {
        return Err(Failure::Config(format!(
            "run.datum: window carries {} modes at this spacing, got {}",
            metric.modes(),
            cfg.datum
        )));
    }
    let q = cfg.potential();
    let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).map_err(hard)?;
    let data: Vec<C64> = metric
        .eigenfunction(cfg.datum)
        .into_iter()
        .map(|v| C64::new(v, 0.0))
        .collect();
    let sols = op.solve_windows_many(vec![data.clone()]).map_err(hard)?;
    let v = &sols[0];
    let pair = CauchyPair {
        f: op.window_trace(v),
        g: op.normal_trace(v, &data),
    };
    let pn = pair_norm(&metric, &pair).map_err(hard)?;

    let prov = provenance(cfg, dom.summary());
    let mut body = String::from("id x y z re im\n");
    for (rank, &id) in op.unknowns().iter().enumerate() {
        let c = dom.coords(id as usize);
        body.push_str(&format!(
            "{} {} {} {} {} {}\n",
            id, c[0], c[1], c[2], v[rank].re, v[rank].im
        ));
    }
    let path = write_artifact(
        cfg,
        "forward_field.txt",
        &format!("{}{}", text_header(&prov), body),
    )?;

    let summary = compose(
        &prov,
        json!({
            "datum": cfg.datum,
            "window_modes": metric.modes(),
            "unknowns": op.unknowns().len(),
            "pair_norm": pn,
            "field_artifact": path,
        }),
    );
    Ok(Outcome {
        text: vec![
            format!("grid: {}", prov.grid),
            format!("datum: {} of {} window modes", cfg.datum, metric.modes()),
            format!("unknowns: {}", op.unknowns().len()),
            format!("cauchy pair norm: {:.6e}", pn),
            format!("field written to {path}"),
        ],
        summary,
        soft: vec![],
    })
}

// ---------------------------------------------------------------------------
// green-check
// ---------------------------------------------------------------------------

fn run_green_check(cfg: &ResolvedConfig) -> Result<Outcome, Failure> {
    let dom = augmented(cfg)?;
    let q_ext = cfg.potential().extend_to_omega0(&dom).map_err(hard)?;
    let builder = KernelStackBuilder::new(&dom, &q_ext, Impedance::default()).map_err(hard)?;
    let op = &builder.opq;

    // Source at the body center (the interface node on the split fixtures).
    let mid = (0.5 / dom.h).round() as i64;
    let mut p = [0i64; 3];
    for a in p.iter_mut().take(dom.dim) {
        *a = mid;
    }
    let y = dom
        .step_id(&p)
        .filter(|&id| op.rank_of(id).is_some())
        .ok_or_else(|| Failure::Hard(format!("domain center {p:?} is not an unknown")))?;

    let stack = builder.stack(y).map_err(hard)?;
    let recon = stack.reconstructed();
    let direct = green_column(op, y, [0; 3]).map_err(hard)?;
    let scale = direct.values.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let defect = recon
        .iter()
        .zip(&direct.values)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    let stack_rel = defect / scale.max(1e-300);

    // Symmetry over ten random interior pairs.
    let interior: Vec<usize> = op
        .unknowns()
        .iter()
        .map(|&id| id as usize)
        .filter(|&id| dom.class[id] == NodeClass::Interior)
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut sym_worst = 0.0f64;
    let mut done = 0;
    while done < 10 {
        let a = interior[rng.random_range(0..interior.len())];
        let b = interior[rng.random_range(0..interior.len())];
        if a == b {
            continue;
        }
        let ga = green_column(op, a, [0; 3]).map_err(hard)?;
        let gb = green_column(op, b, [0; 3]).map_err(hard)?;
        let gab = gb.at(op, a).expect("interior node is an unknown");
        let gba = ga.at(op, b).expect("interior node is an unknown");
        let rel = (gab - gba).norm() / gab.norm().max(gba.norm()).max(1e-300);
        sym_worst = sym_worst.max(rel);
        done += 1;
    }

    // Far-field ladder along +x, when the grid affords at least seven steps.
    let kmax = (0.4 / dom.h).floor() as i64;
    let (asym, skip) = if kmax >= 7 {
        let radii = ladder_radii(4, kmax);
        let rep = asymptotics_report(op, y, [1, 0, 0], &radii).map_err(hard)?;
        (Some(rep), None)
    } else {
        (
            None,
            Some(format!(
                "radius ladder too short at this spacing (kmax={kmax} < 7)"
            )),
        )
    };

    let mut soft = Vec::new();
    if stack_rel > 1e-8 {
        soft.push(format!(
            "kernel-stack relative error {stack_rel:.3e} exceeds 1e-8"
        ));
    }
    if sym_worst > 1e-10 {
        soft.push(format!("Green symmetry defect {sym_worst:.3e} exceeds 1e-10"));
    }

    let prov = provenance(cfg, dom.summary());
    let asym_json = asym
        .as_ref()
        .map(|r| {
            json!({
                "dir": r.dir,
                "slopes": r.slopes,
                "envelope_sup": r.envelope_sup,
                "out_of_paper_regime": r.out_of_paper_regime,
            })
        })
        .unwrap_or(Value::Null);
    let payload = json!({
        "kernel_stack_rel_error": stack_rel,
        "kernel_stack_layers": stack.layers.len(),
        "symmetry_worst": sym_worst,
        "symmetry_pairs": 10,
        "asymptotics": asym_json,
        "asymptotics_skipped": skip,
    });
    let path = write_artifact(cfg, "green_check.json", &json_artifact(&prov, payload.clone()))?;

    let mut text = vec![
        format!("grid: {}", prov.grid),
        format!("kernel-stack relative error: {stack_rel:.3e} (threshold 1e-8)"),
        format!("Green symmetry worst defect: {sym_worst:.3e} over 10 pairs (threshold 1e-10)"),
    ];
    match (&asym, &skip) {
        (Some(r), _) => {
            text.push(format!(
                "far-field slopes (value, gradient, Hessian): {:.3} {:.3} {:.3}{}",
                r.slopes[0],
                r.slopes[1],
                r.slopes[2],
                if r.out_of_paper_regime {
                    " (outside the quantitative regime)"
                } else {
                    ""
                }
            ));
        }
        (None, Some(reason)) => text.push(format!("asymptotics skipped: {reason}")),
        _ => {}
    }
    text.push(format!("report written to {path}"));

    Ok(Outcome {
        text,
        summary: compose(&prov, payload),
        soft,
    })
}

// ---------------------------------------------------------------------------
// distance
// ---------------------------------------------------------------------------

fn run_distance(cfg: &ResolvedConfig) -> Result<Outcome, Failure> {
    require_potential2(cfg, "distance")?;
    let dom = physical(cfg)?;
    let metric = window_metric(&dom, cfg.m)?;
    let q1 = cfg.potential();
    let q2 = cfg.potential2().expect("checked above");
    let op1 = DiscreteOperator::assemble(&dom, &q1, Impedance::default()).map_err(hard)?;
    let op2 = DiscreteOperator::assemble(&dom, &q2, Impedance::default()).map_err(hard)?;
    let s1 = generate_cauchy_space(&op1, &metric, cfg.m).map_err(hard)?;
    let s2 = generate_cauchy_space(&op2, &metric, cfg.m).map_err(hard)?;
    let rep = aperture(&s1, &s2).map_err(hard)?;

    // Drift under truncation: rebuild both spaces from pair prefixes at the
    // dropped generation count and compare apertures.
    let mp = (cfg.m - (cfg.m / 4).max(1)).max(1);
    let s1p = subspace_from_pairs(&metric, &s1.pairs[..mp]).map_err(hard)?;
    let s2p = subspace_from_pairs(&metric, &s2.pairs[..mp]).map_err(hard)?;
    let repp = aperture(&s1p, &s2p).map_err(hard)?;
    let drift = (rep.value - repp.value).abs();
    let stabilized = drift <= (0.25 * rep.value).max(1e-9);

    let mut soft = Vec::new();
    if !stabilized {
        soft.push(format!(
            "aperture not m-stabilized: {:.6e} at m={} vs {:.6e} at m={}",
            rep.value, cfg.m, repp.value, mp
        ));
    }

    let prov = provenance(cfg, dom.summary());
    let payload = json!({
        "aperture": rep.value,
        "one_sided": rep.one_sided,
        "unequal_dims": rep.unequal_dims,
        "m": cfg.m,
        "dims": [s1.dims(), s2.dims()],
        "dropped": [s1.dropped, s2.dropped],
        "m_drop": mp,
        "aperture_at_drop": repp.value,
        "stabilized": stabilized,
    });
    let path = write_artifact(cfg, "distance.json", &json_artifact(&prov, payload.clone()))?;

    Ok(Outcome {
        text: vec![
            format!("grid: {}", prov.grid),
            format!("aperture at m={}: {:.6e}", cfg.m, rep.value),
            format!(
                "one-sided gaps: {:.6e} {:.6e}",
                rep.one_sided[0], rep.one_sided[1]
            ),
            format!(
                "aperture at m={}: {:.6e} (drift {:.3e}, {})",
                mp,
                repp.value,
                drift,
                if stabilized { "stabilized" } else { "NOT stabilized" }
            ),
            format!("report written to {path}"),
        ],
        summary: compose(&prov, payload),
        soft,
    })
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn run_sweep(cfg: &ResolvedConfig) -> Result<Outcome, Failure> {
    let dom = physical(cfg)?;
    let _ = window_metric(&dom, cfg.m)?;
    let sw = SweepConfig {
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        m: cfg.m,
        e0: cfg.e0,
    };
    let sweep = stability_sweep(&cfg.domain_spec(), &sw).map_err(hard)?;

    let prov = provenance(cfg, dom.summary());
    let csv = format!("{}{}", text_header(&prov), sweep.records_csv());
    let csv_path = write_artifact(cfg, "sweep_records.csv", &csv)?;
    let summary_value = serde_json::to_value(&sweep.summary).expect("summary serializes");
    let payload = json!({ "summary": summary_value });
    let json_path = write_artifact(cfg, "sweep_summary.json", &json_artifact(&prov, payload.clone()))?;

    let soft: Vec<String> = sweep
        .summary
        .flags
        .iter()
        .map(|f| format!("sweep flag: {f}"))
        .collect();

    let s = &sweep.summary;
    Ok(Outcome {
        text: vec![
            format!("grid: {}", prov.grid),
            format!(
                "samples: {} drawn + 1 degenerate injection, {} in the ratio statistics",
                s.n_samples, s.n_used
            ),
            format!(
                "Lipschitz ratio E/eps0: max {:.6e} median {:.6e} min {:.6e}",
                s.max_ratio, s.median_ratio, s.min_ratio
            ),
            format!(
                "Spearman rank correlation (E vs eps0): {}",
                s.spearman
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "undefined".into())
            ),
            format!("flags: {:?}", s.flags),
            format!("records written to {csv_path}"),
            format!("summary written to {json_path}"),
        ],
        summary: compose(&prov, payload),
        soft,
    })
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

fn run_probe(cfg: &ResolvedConfig) -> Result<Outcome, Failure> {
    require_potential2(cfg, "probe")?;
    let dom = augmented(cfg)?;
    let chain = validate_chain(&dom, &cfg.chain)
        .map_err(|e| Failure::Config(format!("run.chain: {e}")))?;
    let q1 = cfg.potential();
    let q2 = cfg.potential2().expect("checked above");
    let bc = Impedance::default();

    let kernel = SingularKernel::new(&dom, &q1, &q2, bc).map_err(hard)?;
    let small =
        smallness_propagation_report(&kernel, &chain, cfg.depth, &cfg.radii, None).map_err(hard)?;
    let boundary = boundary_stability_probe(&dom, &q1, &q2, bc, &cfg.radii).map_err(hard)?;

    let prov = provenance(cfg, dom.summary());

    let mut scsv = String::from("r,s0,s1,s2,ratio1,ratio2,dist,envelope\n");
    for w in &small.rows {
        scsv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            w.r, w.s0, w.s1, w.s2, w.ratio1, w.ratio2, w.dist, w.envelope
        ));
    }
    let scsv_path = write_artifact(
        cfg,
        "probe_smallness.csv",
        &format!("{}{}", text_header(&prov), scsv),
    )?;
    let small_payload = json!({
        "depth": small.k,
        "axis": small.axis,
        "slope1": small.slope1,
        "slope2": small.slope2,
        "r2_1": small.r2_1,
        "r2_2": small.r2_2,
        "beta": small.beta,
        "gamma": small.gamma,
        "zero_case": small.zero_case,
        "soft_window": small.soft_window,
    });
    let sjson_path = write_artifact(
        cfg,
        "probe_smallness.json",
        &json_artifact(&prov, json!({ "smallness": small_payload })),
    )?;

    let mut bcsv = String::from(
        "r,s1_re,s1_im,s2_re,s2_im,s1_ref_re,s1_ref_im,s2_ref_re,s2_ref_im,s2_lin_re,s2_lin_im\n",
    );
    for w in &boundary.rows {
        bcsv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            w.r,
            w.s1.re,
            w.s1.im,
            w.s2.re,
            w.s2.im,
            w.s1_ref.re,
            w.s1_ref.im,
            w.s2_ref.re,
            w.s2_ref.im,
            w.s2_lin.re,
            w.s2_lin.im
        ));
    }
    let bcsv_path = write_artifact(
        cfg,
        "probe_boundary.csv",
        &format!("{}{}", text_header(&prov), bcsv),
    )?;
    let boundary_payload = json!({
        "recovered_jump": boundary.recovered_jump,
        "recovered_slope": boundary.recovered_slope,
        "r2_jump": boundary.r2_jump,
        "r2_slope": boundary.r2_slope,
        "low_confidence": boundary.low_confidence,
        "soft_window": boundary.soft_window,
    });
    let bjson_path = write_artifact(
        cfg,
        "probe_boundary.json",
        &json_artifact(&prov, json!({ "boundary": boundary_payload })),
    )?;

    let mut soft = Vec::new();
    if !small.zero_case && small.slope1.is_some() && small.r2_1 < 0.9 {
        soft.push(format!(
            "smallness ladder fit low confidence: r2 {:.3} below 0.9",
            small.r2_1
        ));
    }
    if boundary.low_confidence {
        soft.push(format!(
            "boundary recovery fit low confidence: r2 jump {:.3}, slope {:.3}",
            boundary.r2_jump, boundary.r2_slope
        ));
    }

    let payload = json!({
        "smallness": small_payload,
        "boundary": boundary_payload,
    });
    Ok(Outcome {
        text: vec![
            format!("grid: {}", prov.grid),
            format!(
                "smallness ladder at depth {} (axis {}): slope1 {} slope2 {} (r2 {:.3}/{:.3}){}",
                small.k,
                small.axis,
                small
                    .slope1
                    .map(|v| format!("{v:.3}"))
                    .unwrap_or_else(|| "n/a".into()),
                small
                    .slope2
                    .map(|v| format!("{v:.3}"))
                    .unwrap_or_else(|| "n/a".into()),
                small.r2_1,
                small.r2_2,
                if small.soft_window {
                    " [beyond the dyadic window]"
                } else {
                    ""
                }
            ),
            format!(
                "boundary recovery: jump {:.6e} slope {:.6e} (r2 {:.3}/{:.3})",
                boundary.recovered_jump,
                boundary.recovered_slope,
                boundary.r2_jump,
                boundary.r2_slope
            ),
            format!("smallness written to {scsv_path} and {sjson_path}"),
            format!("boundary written to {bcsv_path} and {bjson_path}"),
        ],
        summary: compose(&prov, payload),
        soft,
    })
}

// ---------------------------------------------------------------------------
// three-spheres
// ---------------------------------------------------------------------------

fn run_three_spheres(cfg: &ResolvedConfig) -> Result<Outcome, Failure> {
    let dom = physical(cfg)?;
    let metric = window_metric(&dom, cfg.m)?;
    let q = cfg.potential();
    let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).map_err(hard)?;

    // Random complex combinations of the first m window eigenfunctions.
    let basis: Vec<Vec<f64>> = (0..cfg.m).map(|k| metric.eigenfunction(k)).collect();
    let s = metric.modes();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let datas: Vec<Vec<C64>> = (0..cfg.n_samples)
        .map(|_| {
            let mut data = vec![C64::new(0.0, 0.0); s];
            for phi in &basis {
                let c = C64::new(
                    2.0 * rng.random::<f64>() - 1.0,
                    2.0 * rng.random::<f64>() - 1.0,
                );
                for (d, &p) in data.iter_mut().zip(phi) {
                    *d += c * p;
                }
            }
            data
        })
        .collect();
    let sols = op.solve_windows_many(datas).map_err(hard)?;

    let mut center = [0.0f64; 3];
    for (slot, &c) in center.iter_mut().zip(cfg.center.iter()) {
        *slot = c;
    }
    let ts = three_spheres_experiment(&op, &sols, center, cfg.spheres).map_err(hard)?;

    let prov = provenance(cfg, dom.summary());
    let mut csv = String::from("index,tau\n");
    for (i, t) in ts.tau.iter().enumerate() {
        csv.push_str(&format!("{i},{t}\n"));
    }
    let csv_path = write_artifact(
        cfg,
        "three_spheres.csv",
        &format!("{}{}", text_header(&prov), csv),
    )?;

    let mut soft = Vec::new();
    if ts.tau.is_empty() {
        soft.push("every sample was degenerate".into());
    }
    let tau_max = ts.tau.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if ts.tau.iter().any(|&t| t <= 0.0 || t >= 1.0) {
        soft.push(format!(
            "three-spheres exponent outside (0,1): min {:.4} max {:.4}",
            ts.tau_min, tau_max
        ));
    }

    let payload = json!({
        "samples": cfg.n_samples,
        "m": cfg.m,
        "center": cfg.center,
        "spheres": cfg.spheres,
        "kept": ts.tau.len(),
        "skipped": ts.skipped,
        "tau_min": ts.tau_min,
        "constant_at_half": ts.constant_at_half,
    });
    let json_path = write_artifact(
        cfg,
        "three_spheres.json",
        &json_artifact(&prov, payload.clone()),
    )?;

    Ok(Outcome {
        text: vec![
            format!("grid: {}", prov.grid),
            format!(
                "samples: {} ({} kept, {} degenerate)",
                cfg.n_samples,
                ts.tau.len(),
                ts.skipped
            ),
            format!("exponent range: [{:.4}, {:.4}]", ts.tau_min, tau_max),
            format!("constant at tau=1/2: {:.4}", ts.constant_at_half),
            format!("exponents written to {csv_path}"),
            format!("summary written to {json_path}"),
        ],
        summary: compose(&prov, payload),
        soft,
    })
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

fn run_reconstruct(cfg: &ResolvedConfig) -> Result<Outcome, Failure> {
    let dom = physical(cfg)?;
    let _ = window_metric(&dom, cfg.m)?;
    let truth = cfg.potential();
    let theta0: Vec<AffineCoeff> = match cfg.potential2() {
        Some(p) => p.coeffs,
        None => vec![AffineCoeff::ZERO; cfg.subdomains],
    };
    let rcfg = ReconstructConfig {
        m: cfg.m,
        max_iters: cfg.max_iters,
        ..ReconstructConfig::default()
    };

    let prov = provenance(cfg, dom.summary());
    let spec = cfg.domain_spec();
    match reconstruct(&spec, &truth, &theta0, &rcfg) {
        Ok(rec) => {
            let trace_path = write_artifact(
                cfg,
                "reconstruct_trace.csv",
                &format!("{}{}", text_header(&prov), trace_csv(&rec.trace)),
            )?;
            let last = rec.trace.last().expect("trace is never empty");
            let payload = json!({
                "converged": rec.converged,
                "diverged": false,
                "accepted": rec.accepted,
                "iterations": rec.trace.len() - 1,
                "step": rec.step,
                "lipschitz": rec.lipschitz,
                "final_misfit": last.misfit,
                "final_aperture": last.aperture,
                "final_coeff_error": last.coeff_error,
                "theta": serde_json::to_value(&rec.theta).expect("coefficients serialize"),
            });
            let json_path = write_artifact(
                cfg,
                "reconstruct_summary.json",
                &json_artifact(&prov, payload.clone()),
            )?;
            let mut soft = Vec::new();
            if !rec.converged {
                soft.push(format!(
                    "budget exhausted before any tolerance was met (final misfit {:.3e})",
                    last.misfit
                ));
            }
            Ok(Outcome {
                text: vec![
                    format!("grid: {}", prov.grid),
                    format!(
                        "{} after {} accepted steps (step {:.3e}, Lipschitz estimate {:.3e})",
                        if rec.converged {
                            "converged"
                        } else {
                            "budget exhausted"
                        },
                        rec.accepted,
                        rec.step,
                        rec.lipschitz
                    ),
                    format!(
                        "final misfit {:.6e}, aperture {:.6e}, coefficient error {:.6e}",
                        last.misfit, last.aperture, last.coeff_error
                    ),
                    format!("trace written to {trace_path}"),
                    format!("summary written to {json_path}"),
                ],
                summary: compose(&prov, payload),
                soft,
            })
        }
        Err(StabilityError::Diverged {
            halvings,
            accepted,
            trace,
        }) => {
            let trace_path = write_artifact(
                cfg,
                "reconstruct_trace.csv",
                &format!("{}{}", text_header(&prov), trace_csv(&trace)),
            )?;
            let last = trace.last();
            let payload = json!({
                "converged": false,
                "diverged": true,
                "halvings": halvings,
                "accepted": accepted,
                "final_misfit": last.map(|r| r.misfit),
                "final_aperture": last.map(|r| r.aperture),
                "final_coeff_error": last.map(|r| r.coeff_error),
            });
            let json_path = write_artifact(
                cfg,
                "reconstruct_summary.json",
                &json_artifact(&prov, payload.clone()),
            )?;
            Ok(Outcome {
                text: vec![
                    format!("grid: {}", prov.grid),
                    format!(
                        "diverged after {halvings} consecutive halvings ({accepted} accepted steps)"
                    ),
                    format!("trace written to {trace_path}"),
                    format!("summary written to {json_path}"),
                ],
                summary: compose(&prov, payload),
                soft: vec![format!(
                    "step control diverged after {halvings} consecutive halvings"
                )],
            })
        }
        Err(e) => Err(hard(e)),
    }
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, runner): (&RunArgs, fn(&ResolvedConfig) -> Result<Outcome, Failure>) =
        match &cli.cmd {
            Cmd::Forward(a) => (a, run_forward),
            Cmd::GreenCheck(a) => (a, run_green_check),
            Cmd::Distance(a) => (a, run_distance),
            Cmd::Sweep(a) => (a, run_sweep),
            Cmd::Probe(a) => (a, run_probe),
            Cmd::ThreeSpheres(a) => (a, run_three_spheres),
            Cmd::Reconstruct(a) => (a, run_reconstruct),
        };

    let cfg = match ResolvedConfig::load(&args.config, &args.overrides()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    match runner(&cfg) {
        Ok(out) => {
            if cfg.format == "json" {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&out.summary).expect("summary serializes")
                );
            } else {
                for line in &out.text {
                    println!("{line}");
                }
            }
            if out.soft.is_empty() {
                ExitCode::SUCCESS
            } else {
                for reason in &out.soft {
                    eprintln!("soft-fail: {reason}");
                }
                if args.soft_fail_ok {
                    eprintln!("soft-fail tolerated (--soft-fail-ok)");
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(3)
                }
            }
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Hard(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
