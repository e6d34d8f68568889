//! Plain-text configuration: dotted keys, one `key = value` per line.
//!
//! Configs are the experiment record, so the grammar is strict: unknown keys
//! are errors, every known key has a documented default, and the effective
//! (defaults-applied) config is dumped next to every result. `--set key=value`
//! overrides land on top of the file.
//!
//! ```text
//! # comment
//! seed = 42
//! decay.kind = linear
//! decay.beta0 = 1.0
//! space.ops = none,skip,conv3x3
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use dartsmini_core::minibench::{BenchSpec, SyntheticSpec, TrainBudget};
use dartsmini_core::schedules::{BetaSchedule, DecayKind};
use dartsmini_core::search::{ArchHp, SearchConfig, WeightHp};
use dartsmini_core::supernet::{AuxBranchKind, CellAggregation, OpKind, SearchSpaceSpec};

/// Every known key: `(key, default, description)`.
///
/// This table is the single source of truth for defaults, for the dump
/// order, and for unknown-key detection.
pub const KNOWN_KEYS: &[(&str, &str, &str)] = &[
    ("seed", "42", "top-level seed; all randomness derives from it"),
    ("space.num_nodes", "2", "intermediate nodes per cell"),
    ("space.num_inputs", "1", "input nodes per cell (1 or 2)"),
    ("space.ops", "none,skip,conv3x3", "candidate ops, comma-separated"),
    ("space.num_cells", "1", "stacked cells"),
    ("space.channels", "8", "feature channels"),
    ("space.has_reduction", "false", "insert one stride-2 reduction cell"),
    ("space.agg", "sum", "cell output aggregation: sum|concat"),
    (
        "space.aux_on_input_edges",
        "true",
        "apply the auxiliary branch on edges leaving input nodes too",
    ),
    ("decay.kind", "linear", "beta decay: linear|cosine|step|hold-then-linear|constant"),
    ("decay.beta0", "1", "initial auxiliary coefficient, in [0,1]"),
    ("decay.step_epoch", "45", "switch epoch for step decay"),
    ("decay.hold_until", "0", "hold horizon for hold-then-linear decay"),
    ("search.epochs", "30", "search epochs"),
    ("search.batch_size", "64", "paired minibatch size"),
    ("search.split_ratio", "0.5", "train fraction of the bi-level split"),
    ("search.weight_lr", "0.05", "weight SGD learning rate (cosine-annealed)"),
    ("search.weight_lr_min", "0.001", "cosine annealing floor"),
    ("search.weight_momentum", "0.9", "weight SGD momentum"),
    ("search.weight_decay", "0.0003", "weight L2 decay"),
    ("search.arch_lr", "0.001", "architecture Adam learning rate"),
    ("search.arch_beta1", "0.5", "architecture Adam beta1"),
    ("search.arch_beta2", "0.999", "architecture Adam beta2"),
    ("search.arch_eps", "1e-8", "architecture Adam epsilon"),
    ("search.arch_weight_decay", "0.001", "architecture L2 decay"),
    (
        "search.aux_branch",
        "identity-skip",
        "auxiliary branch: identity-skip|learnable-projection",
    ),
    ("search.track_hessian", "false", "record the max Hessian eigenvalue per epoch"),
    ("search.genotype_k", "1", "retained incoming edges per node at discretization"),
    ("data.train_samples", "512", "search-time samples (split 50/50 by default)"),
    ("data.val_samples", "256", "held-out samples scored by the benchmark"),
    ("data.noise", "0.1", "per-pixel noise level"),
    ("data.group_offset", "0.4", "mean-intensity gap between class groups (linear cue)"),
    ("data.ring_amp", "1.0", "ring amplitude (nonlinear cue)"),
    ("bench.epochs", "30", "training epochs per benchmark genotype"),
    ("bench.batch_size", "64", "benchmark training batch size"),
    ("bench.lr", "0.01", "benchmark Adam learning rate"),
    ("bench.weight_decay", "0.0001", "benchmark L2 decay"),
    ("bench.train_seeds", "3", "trainings per genotype"),
    ("bench.max_genotypes", "1000", "enumeration safety limit"),
    ("bench.eval_seeds", "5", "search runs per method in bench eval"),
    ("diag.hessian.iters", "50", "power iteration cap"),
    ("diag.hessian.tol", "1e-6", "power iteration residual tolerance"),
    ("diag.hessian.samples", "512", "validation samples in the fixed eigenvalue batch"),
    ("diag.landscape.radius", "1.0", "landscape probe radius"),
    ("diag.landscape.resolution", "5", "landscape grid resolution (odd)"),
    ("diag.landscape.beta", "0", "auxiliary coefficient during the probe"),
    ("diag.lambda.h", "3", "layers of the convergence proxy"),
    ("diag.lambda.beta", "1", "auxiliary coefficient in the proxy"),
    ("diag.lambda.conv", "0.5,0.5", "conv weights per layer, comma-separated"),
    (
        "diag.lambda.skip",
        "0.15",
        "skip weights: rows i=1..h-2 semicolon-separated, entries comma-separated",
    ),
    ("diag.resnet.init", "0.0", "initial trainable skip coefficient"),
    ("diag.resnet.depth", "6", "residual chain depth"),
    ("diag.resnet.epochs", "80", "residual chain training epochs"),
    ("diag.resnet.dim", "12", "residual chain feature width"),
    ("diag.resnet.samples", "64", "residual chain dataset size"),
    ("diag.resnet.weight_lr", "0.02", "residual chain weight learning rate"),
    ("diag.resnet.beta_lr", "0.4", "residual chain coefficient learning rate"),
];

/// Raw parsed key-value pairs with their source line numbers.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, (String, usize)>,
}

/// Parse config text. Comments (`#`) and blank lines are skipped; everything
/// else must be `key = value`. Errors carry 1-based line and column.
pub fn parse_config(text: &str) -> Result<RawConfig> {
    let mut values = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let eq = raw.find('=').ok_or_else(|| {
            anyhow!(
                "config parse error at line {line_no}, column {}: expected `key = value`",
                raw.len().max(1)
            )
        })?;
        let key = raw[..eq].trim();
        let value = raw[eq + 1..].trim();
        if key.is_empty() {
            bail!("config parse error at line {line_no}, column 1: empty key");
        }
        if !key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
        {
            let col = raw.find(key).unwrap_or(0) + 1;
            bail!("config parse error at line {line_no}, column {col}: invalid key `{key}`");
        }
        if values
            .insert(key.to_string(), (value.to_string(), line_no))
            .is_some()
        {
            bail!("config parse error at line {line_no}, column 1: duplicate key `{key}`");
        }
    }
    Ok(RawConfig { values })
}

/// Fully resolved configuration with defaults applied.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults only.
    pub fn defaults() -> Self {
        RunConfig {
            values: KNOWN_KEYS
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }

    /// Apply a raw config plus `--set` overrides on top of the defaults.
    pub fn resolve(raw: &RawConfig, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::defaults();
        for (key, (value, line)) in &raw.values {
            if !cfg.values.contains_key(key) {
                bail!("unknown config key `{key}` at line {line}");
            }
            cfg.values.insert(key.clone(), value.clone());
        }
        for (key, value) in overrides {
            if !cfg.values.contains_key(key) {
                bail!("unknown config key `{key}` in --set");
            }
            cfg.values.insert(key.clone(), value.clone());
        }
        // Fail fast on anything malformed.
        cfg.search_config()?;
        cfg.bench_spec()?;
        cfg.lambda_inputs()?;
        Ok(cfg)
    }

    fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unregistered config key `{key}`"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse::<T>()
            .map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => bail!("config key `{key}`: expected true|false, got `{other}`"),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn space(&self) -> Result<SearchSpaceSpec> {
        let ops = self
            .get("space.ops")
            .split(',')
            .map(|s| OpKind::parse(s.trim()))
            .collect::<dartsmini_core::Result<Vec<_>>>()
            .map_err(|e| anyhow!("config key `space.ops`: {e}"))?;
        let space = SearchSpaceSpec {
            num_nodes: self.parse("space.num_nodes")?,
            num_inputs: self.parse("space.num_inputs")?,
            candidate_ops: ops,
            num_cells: self.parse("space.num_cells")?,
            channels: self.parse("space.channels")?,
            has_reduction: self.parse_bool("space.has_reduction")?,
            aggregation: CellAggregation::parse(self.get("space.agg"))
                .map_err(|e| anyhow!("config key `space.agg`: {e}"))?,
            aux_on_input_edges: self.parse_bool("space.aux_on_input_edges")?,
        };
        space.validate().map_err(|e| anyhow!("space: {e}"))?;
        Ok(space)
    }

    pub fn schedule(&self) -> Result<BetaSchedule> {
        let schedule = BetaSchedule {
            kind: DecayKind::parse(self.get("decay.kind"))
                .map_err(|e| anyhow!("config key `decay.kind`: {e}"))?,
            beta0: self.parse("decay.beta0")?,
            total_epochs: self.parse("search.epochs")?,
            step_epoch: self.parse("decay.step_epoch")?,
            hold_until: self.parse("decay.hold_until")?,
        };
        schedule.validate().map_err(|e| anyhow!("decay: {e}"))?;
        Ok(schedule)
    }

    pub fn search_config(&self) -> Result<SearchConfig> {
        let cfg = SearchConfig {
            epochs: self.parse("search.epochs")?,
            batch_size: self.parse("search.batch_size")?,
            split_ratio: self.parse("search.split_ratio")?,
            seed: self.seed()?,
            weight: WeightHp {
                lr: self.parse("search.weight_lr")?,
                lr_min: self.parse("search.weight_lr_min")?,
                momentum: self.parse("search.weight_momentum")?,
                weight_decay: self.parse("search.weight_decay")?,
            },
            arch: ArchHp {
                lr: self.parse("search.arch_lr")?,
                beta1: self.parse("search.arch_beta1")?,
                beta2: self.parse("search.arch_beta2")?,
                eps: self.parse("search.arch_eps")?,
                weight_decay: self.parse("search.arch_weight_decay")?,
            },
            schedule: self.schedule()?,
            space: self.space()?,
            aux: AuxBranchKind::parse(self.get("search.aux_branch"))
                .map_err(|e| anyhow!("config key `search.aux_branch`: {e}"))?,
            track_hessian: self.parse_bool("search.track_hessian")?,
            hessian_iters: self.parse("diag.hessian.iters")?,
            hessian_tol: self.parse("diag.hessian.tol")?,
            hessian_samples: self.parse("diag.hessian.samples")?,
        };
        cfg.validate().map_err(|e| anyhow!("search: {e}"))?;
        Ok(cfg)
    }

    pub fn genotype_k(&self) -> Result<usize> {
        self.parse("search.genotype_k")
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            classes: 4,
            side: 8,
            train_samples: self.parse("data.train_samples")?,
            val_samples: self.parse("data.val_samples")?,
            noise: self.parse("data.noise")?,
            group_offset: self.parse("data.group_offset")?,
            ring_amp: self.parse("data.ring_amp")?,
        };
        spec.validate().map_err(|e| anyhow!("data: {e}"))?;
        Ok(spec)
    }

    pub fn bench_spec(&self) -> Result<BenchSpec> {
        let spec = BenchSpec {
            space: self.space()?,
            dataset: self.synthetic_spec()?,
            budget: TrainBudget {
                epochs: self.parse("bench.epochs")?,
                batch_size: self.parse("bench.batch_size")?,
                lr: self.parse("bench.lr")?,
                weight_decay: self.parse("bench.weight_decay")?,
                seeds: self.parse("bench.train_seeds")?,
            },
            max_genotypes: self.parse("bench.max_genotypes")?,
            seed: self.seed()?,
        };
        spec.validate().map_err(|e| anyhow!("bench: {e}"))?;
        Ok(spec)
    }

    pub fn eval_seeds(&self) -> Result<usize> {
        self.parse("bench.eval_seeds")
    }

    /// The lambda-proxy inputs: `(conv, skip, beta, h)`.
    pub fn lambda_inputs(&self) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64, usize)> {
        let h: usize = self.parse("diag.lambda.h")?;
        let beta: f64 = self.parse("diag.lambda.beta")?;
        let conv = self
            .get("diag.lambda.conv")
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .context("config key `diag.lambda.conv`")?;
        // Row 0 is always empty; the key holds rows 1..h-2.
        let mut skip: Vec<Vec<f64>> = vec![Vec::new()];
        let raw = self.get("diag.lambda.skip").trim();
        if !raw.is_empty() {
            for row in raw.split(';') {
                let row = row.trim();
                if row.is_empty() {
                    skip.push(Vec::new());
                    continue;
                }
                skip.push(
                    row.split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .context("config key `diag.lambda.skip`")?,
                );
            }
        }
        Ok((conv, skip, beta, h))
    }

    pub fn hessian_params(&self) -> Result<(usize, f64, usize)> {
        Ok((
            self.parse("diag.hessian.iters")?,
            self.parse("diag.hessian.tol")?,
            self.parse("diag.hessian.samples")?,
        ))
    }

    pub fn landscape_params(&self) -> Result<(f64, usize, f64)> {
        Ok((
            self.parse("diag.landscape.radius")?,
            self.parse("diag.landscape.resolution")?,
            self.parse("diag.landscape.beta")?,
        ))
    }

    pub fn resnet_params(&self) -> Result<(f64, dartsmini_core::diagnostics::ResBetaConfig)> {
        Ok((
            self.parse("diag.resnet.init")?,
            dartsmini_core::diagnostics::ResBetaConfig {
                depth: self.parse("diag.resnet.depth")?,
                epochs: self.parse("diag.resnet.epochs")?,
                dim: self.parse("diag.resnet.dim")?,
                samples: self.parse("diag.resnet.samples")?,
                weight_lr: self.parse("diag.resnet.weight_lr")?,
                beta_lr: self.parse("diag.resnet.beta_lr")?,
                weight_std: 0.12,
            },
        ))
    }

    /// Canonical effective-config text: all keys, sorted, with a doc comment.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# effective configuration (all keys, defaults applied)").unwrap();
        for (key, default, doc) in KNOWN_KEYS {
            let value = self.get(key);
            writeln!(out, "# {doc} (default: {default})").unwrap();
            writeln!(out, "{key} = {value}").unwrap();
        }
        out
    }

    /// Short hex hash of the effective config, for artifact headers.
    pub fn hash(&self) -> String {
        use dartsmini_core::rng::derive_seed;
        let canonical: String = self
            .values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        // Two independent 64-bit mixes of the canonical text.
        let a = derive_seed(0x5eed, &canonical);
        let b = derive_seed(0xfeed, &canonical);
        format!("{a:016x}{b:016x}")
    }
}

/// Split a `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got `{arg}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::resolve(&RawConfig::default(), &[]).unwrap();
        assert_eq!(cfg.seed().unwrap(), 42);
        let space = cfg.space().unwrap();
        assert_eq!(space.num_edges(), 3);
        assert_eq!(space.num_ops(), 3);
    }

    #[test]
    fn parse_reports_line_and_column() {
        let err = parse_config("seed = 1\nnonsense without equals\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("column"), "{msg}");
    }

    #[test]
    fn unknown_key_is_an_error_with_line() {
        let raw = parse_config("seed = 1\nspace.warp = 9\n").unwrap();
        let err = RunConfig::resolve(&raw, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("space.warp"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn overrides_win() {
        let raw = parse_config("decay.beta0 = 1\n").unwrap();
        let cfg =
            RunConfig::resolve(&raw, &[("decay.beta0".to_string(), "0".to_string())]).unwrap();
        assert_eq!(cfg.schedule().unwrap().beta0, 0.0);
    }

    #[test]
    fn dump_round_trips_semantically() {
        let raw = parse_config("seed = 7\nsearch.epochs = 12\n").unwrap();
        let cfg = RunConfig::resolve(&raw, &[]).unwrap();
        let dumped = cfg.dump();
        let reparsed = RunConfig::resolve(&parse_config(&dumped).unwrap(), &[]).unwrap();
        assert_eq!(cfg.hash(), reparsed.hash());
        assert_eq!(reparsed.seed().unwrap(), 7);
        assert_eq!(reparsed.search_config().unwrap().epochs, 12);
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(parse_config("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn lambda_skip_rows_parse() {
        let raw = parse_config(
            "diag.lambda.h = 4\ndiag.lambda.conv = 0.5,0.5,0.5\ndiag.lambda.skip = 0.15;0.15,0.15\n",
        )
        .unwrap();
        let cfg = RunConfig::resolve(&raw, &[]).unwrap();
        let (conv, skip, _, h) = cfg.lambda_inputs().unwrap();
        assert_eq!(h, 4);
        assert_eq!(conv.len(), 3);
        assert_eq!(skip, vec![vec![], vec![0.15], vec![0.15, 0.15]]);
    }
}
