//! Saved search state: the best-validation supernet weights plus the learned
//! architecture parameters, in a line-oriented text format that the `diag`
//! and `genotype` subcommands reload.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact and identical runs produce identical files.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use dartsmini_core::supernet::{ArchParams, AuxBranchKind, CellAggregation, OpKind, SearchSpaceSpec, Supernet};
use dartsmini_core::Tensor;

pub struct SearchState {
    pub supernet: Supernet,
    pub arch: ArchParams,
    pub best_epoch: usize,
    pub seed: u64,
}

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let data: Vec<String> = t.data().iter().map(f64::to_string).collect();
    writeln!(out, "tensor {name} {} {}", shape.join(","), data.join(" ")).unwrap();
}

/// Serialize the state with the common artifact header.
pub fn save_state(state: &SearchState, header: &str) -> String {
    let mut out = String::from(header);
    writeln!(out, "format = dartsmini-state-v1").unwrap();
    let space = &state.supernet.space;
    let ops: Vec<&str> = space.candidate_ops.iter().map(|o| o.as_str()).collect();
    writeln!(out, "space.num_nodes = {}", space.num_nodes).unwrap();
    writeln!(out, "space.num_inputs = {}", space.num_inputs).unwrap();
    writeln!(out, "space.ops = {}", ops.join(",")).unwrap();
    writeln!(out, "space.num_cells = {}", space.num_cells).unwrap();
    writeln!(out, "space.channels = {}", space.channels).unwrap();
    writeln!(out, "space.has_reduction = {}", space.has_reduction).unwrap();
    writeln!(out, "space.agg = {}", space.aggregation.as_str()).unwrap();
    writeln!(out, "space.aux_on_input_edges = {}", space.aux_on_input_edges).unwrap();
    writeln!(out, "aux_branch = {}", state.supernet.aux_kind.as_str()).unwrap();
    writeln!(out, "in_channels = {}", state.supernet.in_channels).unwrap();
    writeln!(out, "num_classes = {}", state.supernet.num_classes).unwrap();
    writeln!(out, "best_epoch = {}", state.best_epoch).unwrap();
    writeln!(out, "seed = {}", state.seed).unwrap();
    for (i, p) in state.supernet.params().iter().enumerate() {
        write_tensor(&mut out, &format!("w{i}"), p);
    }
    write_tensor(&mut out, "arch.normal", &state.arch.normal);
    if let Some(r) = &state.arch.reduce {
        write_tensor(&mut out, "arch.reduce", r);
    }
    out
}

fn parse_tensor(rest: &str, line_no: usize) -> Result<(String, Tensor)> {
    let mut parts = rest.splitn(3, ' ');
    let (name, shape, data) = match (parts.next(), parts.next(), parts.next()) {
        (Some(n), Some(s), Some(d)) => (n, s, d),
        _ => bail!("state line {line_no}: malformed tensor line"),
    };
    let shape: Vec<usize> = shape
        .split(',')
        .map(|v| v.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("state line {line_no}: bad shape"))?;
    let data: Vec<f64> = data
        .split_ascii_whitespace()
        .map(|v| v.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("state line {line_no}: bad tensor data"))?;
    let tensor = Tensor::from_vec(shape, data)
        .map_err(|e| anyhow!("state line {line_no}: {e}"))?;
    Ok((name.to_string(), tensor))
}

/// Reload a saved state.
pub fn load_state(text: &str) -> Result<SearchState> {
    let mut fields: std::collections::BTreeMap<String, String> = Default::default();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            tensors.push(parse_tensor(rest, idx + 1)?);
        } else if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            bail!("state line {}: unrecognized line", idx + 1);
        }
    }
    let get = |k: &str| -> Result<&String> {
        fields.get(k).ok_or_else(|| anyhow!("state is missing `{k}`"))
    };
    if get("format")? != "dartsmini-state-v1" {
        bail!("unsupported state format `{}`", get("format")?);
    }
    let ops = get("space.ops")?
        .split(',')
        .map(OpKind::parse)
        .collect::<dartsmini_core::Result<Vec<_>>>()?;
    let space = SearchSpaceSpec {
        num_nodes: get("space.num_nodes")?.parse()?,
        num_inputs: get("space.num_inputs")?.parse()?,
        candidate_ops: ops,
        num_cells: get("space.num_cells")?.parse()?,
        channels: get("space.channels")?.parse()?,
        has_reduction: get("space.has_reduction")?.parse()?,
        aggregation: CellAggregation::parse(get("space.agg")?)?,
        aux_on_input_edges: get("space.aux_on_input_edges")?.parse()?,
    };
    let aux = AuxBranchKind::parse(get("aux_branch")?)?;
    let in_channels: usize = get("in_channels")?.parse()?;
    let num_classes: usize = get("num_classes")?.parse()?;

    // Materialize a supernet of the right shape, then overwrite every weight.
    let mut rng = dartsmini_core::rng::stream(0, "state/load");
    let mut supernet = Supernet::init(&space, in_channels, num_classes, aux, &mut rng)?;
    let mut weights: Vec<Tensor> = Vec::new();
    let mut arch_normal = None;
    let mut arch_reduce = None;
    for (name, tensor) in tensors {
        match name.as_str() {
            "arch.normal" => arch_normal = Some(tensor),
            "arch.reduce" => arch_reduce = Some(tensor),
            _ => weights.push(tensor),
        }
    }
    {
        let mut params = supernet.params_mut();
        if params.len() != weights.len() {
            bail!(
                "state has {} weight tensors, the space implies {}",
                weights.len(),
                params.len()
            );
        }
        for (slot, tensor) in params.iter_mut().zip(weights) {
            if slot.shape() != tensor.shape() {
                bail!(
                    "state tensor shape {:?} does not match expected {:?}",
                    tensor.shape(),
                    slot.shape()
                );
            }
            **slot = tensor;
        }
    }
    let arch = ArchParams {
        normal: arch_normal.ok_or_else(|| anyhow!("state is missing arch.normal"))?,
        reduce: arch_reduce,
    };
    Ok(SearchState {
        supernet,
        arch,
        best_epoch: get("best_epoch")?.parse()?,
        seed: get("seed")?.parse()?,
    })
}
