//! Subcommand implementations and artifact writers.
//!
//! Every emitted file starts with a header comment carrying the tool
//! version, the effective-config hash and the seed, which together pin the
//! run: identical inputs give byte-identical artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dartsmini_core::data::{epoch_order, split_dataset};
use dartsmini_core::diagnostics::{
    gradient_flow_check, hessian_max_eig, lambda_proxy, landscape_probe, resnet_beta_demo,
};
use dartsmini_core::genotype::{
    count_parametric, count_skips, derive_genotype, parse_genotype, serialize_genotype,
};
use dartsmini_core::minibench::{build_table, evaluate_search, genotype_key, BenchTable};
use dartsmini_core::rng;
use dartsmini_core::search::run_search;
use dartsmini_core::Tensor;

use crate::config::RunConfig;
use crate::state::{load_state, save_state, SearchState};

pub const TOOL_VERSION: &str = concat!("dartsmini v", env!("CARGO_PKG_VERSION"));

fn header(cfg: &RunConfig) -> Result<String> {
    Ok(format!(
        "# {TOOL_VERSION}\n# config_hash={}\n# seed={}\n",
        cfg.hash(),
        cfg.seed()?
    ))
}

/// Resolve the output directory: `--out` beats `DARTSMINI_OUT` beats `.`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("DARTSMINI_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_artifact(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output dir `{}`", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, content)
        .with_context(|| format!("cannot write `{}`", path.display()))?;
    Ok(path)
}

/// Load and resolve a config file plus `--set` overrides.
pub fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config `{}`", path.display()))?;
    let raw = crate::config::parse_config(&text)?;
    let overrides = sets
        .iter()
        .map(|s| crate::config::parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    RunConfig::resolve(&raw, &overrides)
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

pub fn cmd_search(cfg: &RunConfig, out: &Path) -> Result<()> {
    let search_cfg = cfg.search_config()?;
    let data = cfg.synthetic_spec()?.generate_train(cfg.seed()?);
    let result = run_search(&search_cfg, &data).map_err(|e| anyhow!("search failed: {e}"))?;
    let head = header(cfg)?;

    // Trajectory CSV: one row per epoch, softmax weight columns last.
    let mut csv = head.clone();
    let mut cols = vec![
        "epoch".to_string(),
        "beta".to_string(),
        "train_loss".to_string(),
        "val_loss".to_string(),
        "val_acc".to_string(),
        "max_eig".to_string(),
    ];
    for e in 0..search_cfg.space.num_edges() {
        for op in &search_cfg.space.candidate_ops {
            cols.push(format!("edge{e}_{}", op.as_str()));
        }
    }
    writeln!(csv, "{}", cols.join(",")).unwrap();
    for r in &result.trajectory {
        let mut row = vec![
            r.epoch.to_string(),
            r.beta.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_acc.to_string(),
            r.max_eig.map(|v| v.to_string()).unwrap_or_default(),
        ];
        for edge in &r.edge_weights {
            row.extend(edge.iter().map(f64::to_string));
        }
        writeln!(csv, "{}", row.join(",")).unwrap();
    }
    write_artifact(out, "trajectory.csv", &csv)?;

    let k = cfg.genotype_k()?;
    let best = derive_genotype(&result.best_arch, &search_cfg.space, k)?;
    let final_g = derive_genotype(&result.final_arch, &search_cfg.space, k)?;
    write_artifact(
        out,
        "genotype_best.txt",
        &format!(
            "{head}# best validation epoch {}\n{}",
            result.best_epoch,
            serialize_genotype(&best)
        ),
    )?;
    write_artifact(
        out,
        "genotype_final.txt",
        &format!("{head}{}", serialize_genotype(&final_g)),
    )?;

    let state = SearchState {
        supernet: result.best_supernet,
        arch: result.best_arch,
        best_epoch: result.best_epoch,
        seed: cfg.seed()?,
    };
    write_artifact(out, "state.txt", &save_state(&state, &head))?;
    write_artifact(out, "effective.conf", &format!("{head}{}", cfg.dump()))?;
    println!(
        "search done: best epoch {} of {}, genotype {}",
        result.best_epoch,
        search_cfg.epochs,
        genotype_key(&best)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// diag
// ---------------------------------------------------------------------------

fn load_search_state(out: &Path, flag: Option<PathBuf>) -> Result<SearchState> {
    let path = flag.unwrap_or_else(|| out.join("state.txt"));
    let text = fs::read_to_string(&path).with_context(|| {
        format!(
            "cannot read saved search state `{}` (run `dartsmini search` first)",
            path.display()
        )
    })?;
    load_state(&text)
}

pub fn cmd_diag_hessian(cfg: &RunConfig, out: &Path, state_path: Option<PathBuf>) -> Result<()> {
    let state = load_search_state(out, state_path)?;
    let (iters, tol, samples) = cfg.hessian_params()?;
    let search_cfg = cfg.search_config()?;
    let data = cfg.synthetic_spec()?.generate_train(state.seed);
    let (_, val) = split_dataset(&data, search_cfg.split_ratio, state.seed)?;
    let mut idx = epoch_order(val.len(), &mut rng::stream(state.seed, "hessian"));
    idx.truncate(samples.min(val.len()));
    let batch = val.batch(&idx);
    let est = hessian_max_eig(
        &state.supernet,
        &state.arch,
        &batch,
        0.0,
        iters,
        tol,
        rng::derive_seed(state.seed, "hessian/start"),
    )?;
    let mut csv = header(cfg)?;
    writeln!(csv, "# batch_samples={}", idx.len()).unwrap();
    writeln!(csv, "value,iterations,residual,converged").unwrap();
    writeln!(
        csv,
        "{},{},{},{}",
        est.value, est.iterations, est.residual, est.converged
    )
    .unwrap();
    write_artifact(out, "hessian.csv", &csv)?;
    println!("max |eigenvalue| {} (residual {})", est.value, est.residual);
    Ok(())
}

pub fn cmd_diag_landscape(
    cfg: &RunConfig,
    out: &Path,
    state_path: Option<PathBuf>,
    radius_flag: Option<f64>,
) -> Result<()> {
    let state = load_search_state(out, state_path)?;
    let (radius_cfg, resolution, beta) = cfg.landscape_params()?;
    let radius = radius_flag.unwrap_or(radius_cfg);
    let search_cfg = cfg.search_config()?;
    let data = cfg.synthetic_spec()?.generate_train(state.seed);
    let (_, val) = split_dataset(&data, search_cfg.split_ratio, state.seed)?;
    let grid = landscape_probe(
        &state.supernet,
        &state.arch,
        &val,
        beta,
        radius,
        resolution,
        rng::derive_seed(state.seed, "directions"),
        search_cfg.batch_size,
    )?;
    let mut csv = header(cfg)?;
    writeln!(csv, "# radius={radius} resolution={resolution} beta={beta}").unwrap();
    let offsets: Vec<String> = grid.offsets.iter().map(f64::to_string).collect();
    writeln!(csv, "offset,{}", offsets.join(",")).unwrap();
    for (bi, b) in grid.offsets.iter().enumerate() {
        let row: Vec<String> = (0..grid.resolution)
            .map(|ai| grid.at(bi, ai).to_string())
            .collect();
        writeln!(csv, "{b},{}", row.join(",")).unwrap();
    }
    write_artifact(out, "landscape.csv", &csv)?;
    println!("landscape center accuracy {}", grid.center());
    Ok(())
}

pub fn cmd_diag_lambda(cfg: &RunConfig, out: &Path, beta_flag: Option<f64>) -> Result<()> {
    let (conv, skip, beta_cfg, h) = cfg.lambda_inputs()?;
    let beta = beta_flag.unwrap_or(beta_cfg);
    let lambda = lambda_proxy(&conv, &skip, beta, h)?;
    let mut csv = header(cfg)?;
    writeln!(csv, "h,beta,lambda").unwrap();
    writeln!(csv, "{h},{beta},{lambda}").unwrap();
    write_artifact(out, "lambda.csv", &csv)?;
    println!("lambda({h}, beta={beta}) = {lambda}");
    Ok(())
}

pub fn cmd_diag_resnet_beta(cfg: &RunConfig, out: &Path, init_flag: Option<f64>) -> Result<()> {
    let (init_cfg, demo_cfg) = cfg.resnet_params()?;
    let init = init_flag.unwrap_or(init_cfg);
    let seed = cfg.seed()?;
    let mut data_rng = rng::stream(seed, "resnet/data");
    let data = Tensor::randn(&[demo_cfg.samples, demo_cfg.dim], 1.0, &mut data_rng);
    let trace = resnet_beta_demo(init, &demo_cfg, &data, seed)?;
    let mut csv = header(cfg)?;
    writeln!(csv, "# init_beta={init} depth={}", demo_cfg.depth).unwrap();
    writeln!(csv, "epoch,beta").unwrap();
    for (i, b) in trace.betas.iter().enumerate() {
        writeln!(csv, "{},{b}", i + 1).unwrap();
    }
    write_artifact(out, "resnet_beta.csv", &csv)?;
    println!(
        "trainable skip coefficient: init {init}, final {}",
        trace.betas.last().copied().unwrap_or(init)
    );
    Ok(())
}

pub fn cmd_diag_gradflow(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut csv = header(cfg)?;
    writeln!(csv, "depth,beta,max_rel_err").unwrap();
    let mut worst = 0.0f64;
    for depth in 2..=8 {
        for beta in [0.0, 0.5, 1.0] {
            let err = gradient_flow_check(depth, beta)?;
            worst = worst.max(err);
            writeln!(csv, "{depth},{beta},{err}").unwrap();
        }
    }
    write_artifact(out, "gradflow.csv", &csv)?;
    println!("gradient-flow identity: worst relative error {worst:.3e}");
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn cmd_bench_build(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.bench_spec()?;
    let table = build_table(&spec).map_err(|e| anyhow!("bench build failed: {e}"))?;
    let content = format!("{}{}", header(cfg)?, table.to_text());
    let path = write_artifact(out, "bench_table.tsv", &content)?;
    let sep = table.separability(&spec.space)?;
    println!(
        "bench table: {} genotypes, separability {:.3}, written to {}",
        table.len(),
        sep,
        path.display()
    );
    Ok(())
}

fn load_table(out: &Path, flag: Option<PathBuf>) -> Result<BenchTable> {
    let path = flag.unwrap_or_else(|| out.join("bench_table.tsv"));
    let text = fs::read_to_string(&path).with_context(|| {
        format!(
            "cannot read bench table `{}` (run `dartsmini bench build` first)",
            path.display()
        )
    })?;
    BenchTable::from_text(&text).map_err(|e| anyhow!("{e}"))
}

pub fn cmd_bench_eval(cfg: &RunConfig, out: &Path, table_path: Option<PathBuf>) -> Result<()> {
    let spec = cfg.bench_spec()?;
    let table = load_table(out, table_path)?;
    let n_seeds = cfg.eval_seeds()?;
    let k = cfg.genotype_k()?;
    let base = cfg.search_config()?;

    let mut csv = header(cfg)?;
    writeln!(
        csv,
        "method,seed,percentile,accuracy,rank,num_parametric,num_skips,best_epoch,genotype"
    )
    .unwrap();
    // Vanilla first (beta0 = 0), then the auxiliary-skip run as configured.
    for (method, beta0) in [("darts", Some(0.0)), ("darts-minus", None)] {
        let mut method_cfg = base.clone();
        if let Some(b0) = beta0 {
            method_cfg.schedule.beta0 = b0;
        }
        let eval = evaluate_search(&method_cfg, &spec, &table, n_seeds, k)
            .map_err(|e| anyhow!("bench eval ({method}) failed: {e}"))?;
        for row in &eval.rows {
            writeln!(
                csv,
                "{method},{},{},{},{},{},{},{},{}",
                row.seed,
                row.percentile,
                row.accuracy,
                row.rank,
                row.num_parametric,
                row.num_skips,
                row.best_epoch,
                row.genotype_key
            )
            .unwrap();
        }
        println!(
            "{method}: mean percentile {:.3} (+-{:.3}), mean #P {:.2}",
            eval.mean_percentile, eval.std_percentile, eval.mean_parametric
        );
    }
    write_artifact(out, "bench_eval.csv", &csv)?;
    Ok(())
}

pub fn cmd_bench_report(cfg: &RunConfig, out: &Path, eval_path: Option<PathBuf>) -> Result<()> {
    let path = eval_path.unwrap_or_else(|| out.join("bench_eval.csv"));
    let text = fs::read_to_string(&path).with_context(|| {
        format!(
            "cannot read eval results `{}` (run `dartsmini bench eval` first)",
            path.display()
        )
    })?;
    // method -> (percentiles, parametric counts, skip counts)
    let mut rows: Vec<(String, f64, f64, f64)> = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("method,") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 9 {
            bail!("malformed eval row in `{}`: `{line}`", path.display());
        }
        rows.push((
            f[0].to_string(),
            f[2].parse().context("percentile")?,
            f[5].parse().context("num_parametric")?,
            f[6].parse().context("num_skips")?,
        ));
    }
    if rows.is_empty() {
        bail!("no eval rows in `{}`", path.display());
    }
    let mut methods: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    methods.dedup();

    let mut csv = header(cfg)?;
    writeln!(
        csv,
        "method,n_seeds,mean_percentile,std_percentile,mean_parametric,std_parametric,mean_skips,std_skips"
    )
    .unwrap();
    let stat = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    for method in &methods {
        let pct: Vec<f64> = rows.iter().filter(|r| &r.0 == method).map(|r| r.1).collect();
        let par: Vec<f64> = rows.iter().filter(|r| &r.0 == method).map(|r| r.2).collect();
        let skp: Vec<f64> = rows.iter().filter(|r| &r.0 == method).map(|r| r.3).collect();
        let (mp, sp) = stat(&pct);
        let (mpar, spar) = stat(&par);
        let (ms, ss) = stat(&skp);
        writeln!(
            csv,
            "{method},{},{mp},{sp},{mpar},{spar},{ms},{ss}",
            pct.len()
        )
        .unwrap();
        println!(
            "{method}: n={} percentile {mp:.3}+-{sp:.3} #P {mpar:.2}+-{spar:.2} #skip {ms:.2}+-{ss:.2}",
            pct.len()
        );
    }
    write_artifact(out, "bench_report.csv", &csv)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// genotype
// ---------------------------------------------------------------------------

pub fn cmd_genotype_derive(
    cfg: &RunConfig,
    out: &Path,
    state_path: Option<PathBuf>,
    k_flag: Option<usize>,
) -> Result<()> {
    let state = load_search_state(out, state_path)?;
    let k = match k_flag {
        Some(k) => k,
        None => cfg.genotype_k()?,
    };
    let genotype = derive_genotype(&state.arch, &state.supernet.space, k)?;
    let text = serialize_genotype(&genotype);
    write_artifact(out, "genotype_derived.txt", &format!("{}{text}", header(cfg)?))?;
    print!("{text}");
    Ok(())
}

pub fn cmd_genotype_show(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read genotype `{}`", path.display()))?;
    let genotype = parse_genotype(&text).map_err(|e| anyhow!("{e}"))?;
    print!("{}", serialize_genotype(&genotype));
    println!(
        "# parametric ops (normal cell): {}",
        count_parametric(&genotype)
    );
    println!("# skip ops (normal cell): {}", count_skips(&genotype));
    Ok(())
}
