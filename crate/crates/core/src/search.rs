//! First-order bi-level search: alternate one SGD step on the network
//! weights (training split) with one Adam step on the architecture
//! parameters (validation split), once per paired minibatch, with the
//! auxiliary coefficient scheduled per epoch.
//!
//! The two levels never see each other's data: weight steps only accept
//! `Train`-tagged batches and architecture steps only `Val`-tagged ones.
//! Everything is driven by named sub-streams of the config seed, so a
//! `(config, seed)` pair reproduces a run bit for bit.

use crate::data::{epoch_order, split_dataset, Batch, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::optim::{adam_step, cosine_lr, sgd_step, AdamState};
use crate::rng;
use crate::schedules::BetaSchedule;
use crate::supernet::{ArchParams, AuxBranchKind, SearchSpaceSpec, Supernet};

/// Weight-optimizer hyperparameters (SGD with momentum, cosine-annealed lr).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightHp {
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for WeightHp {
    fn default() -> Self {
        WeightHp {
            lr: 0.05,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
        }
    }
}

/// Architecture-optimizer hyperparameters (Adam).
#[derive(Debug, Clone, PartialEq)]
pub struct ArchHp {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for ArchHp {
    fn default() -> Self {
        // Adam(0.5, 0.999) at lr 1e-3, the usual architecture-parameter
        // setting; weight decay follows the standard first-order recipe.
        ArchHp {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Everything a search run needs besides the dataset.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub weight: WeightHp,
    pub arch: ArchHp,
    pub schedule: BetaSchedule,
    pub space: SearchSpaceSpec,
    pub aux: AuxBranchKind,
    /// Track the max Hessian eigenvalue of the validation loss per epoch.
    pub track_hessian: bool,
    pub hessian_iters: usize,
    pub hessian_tol: f64,
    /// Samples in the fixed validation batch set used for the estimate.
    pub hessian_samples: usize,
}

impl SearchConfig {
    pub fn new(space: SearchSpaceSpec, schedule: BetaSchedule, seed: u64) -> Self {
        SearchConfig {
            epochs: schedule.total_epochs,
            batch_size: 64,
            split_ratio: 0.5,
            seed,
            weight: WeightHp::default(),
            arch: ArchHp::default(),
            schedule,
            space,
            aux: AuxBranchKind::IdentitySkip,
            track_hessian: false,
            hessian_iters: 30,
            hessian_tol: 1e-4,
            hessian_samples: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.schedule.validate()?;
        if self.schedule.total_epochs != self.epochs {
            return Err(Error::InvalidConfig(format!(
                "schedule covers {} epochs but search runs {}",
                self.schedule.total_epochs, self.epochs
            )));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::InvalidConfig("split_ratio must be in (0,1)".into()));
        }
        // lr 0 is allowed (it freezes that level, useful for ablations);
        // negative rates are not.
        if self.weight.lr < 0.0 || self.arch.lr < 0.0 {
            return Err(Error::InvalidConfig("learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// One epoch of the search trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub max_eig: Option<f64>,
    /// Normal-cell softmax weights per edge, in candidate-op order.
    pub edge_weights: Vec<Vec<f64>>,
}

/// Outcome of a search run.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub final_arch: ArchParams,
    pub best_arch: ArchParams,
    pub best_epoch: usize,
    pub trajectory: Vec<EpochRecord>,
    /// Weights after the last epoch.
    pub supernet: Supernet,
    /// Weights at the best-validation epoch (what discretization and the
    /// post-hoc diagnostics operate on).
    pub best_supernet: Supernet,
}

struct WeightOpt {
    velocity: Vec<Vec<f64>>,
}

impl WeightOpt {
    fn new(net: &Supernet) -> Self {
        WeightOpt {
            velocity: net.params().iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

fn weight_step(
    net: &mut Supernet,
    arch: &ArchParams,
    batch: &Batch,
    beta: f64,
    lr: f64,
    hp: &WeightHp,
    opt: &mut WeightOpt,
) -> Result<f64> {
    if batch.tag != SplitTag::Train {
        return Err(Error::InvalidConfig(
            "weight step received a non-train batch".into(),
        ));
    }
    let tape = crate::tape::Tape::new();
    let lifted = net.lift(&tape, true);
    let arch_vars = net.lift_arch(&tape, arch, false);
    let (loss, _) = net.loss_and_accuracy(&tape, &lifted, &arch_vars, batch, beta)?;
    let loss_val = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let vars = lifted.param_vars();
    let mut params = net.params_mut();
    for ((param, var), velocity) in params.iter_mut().zip(vars).zip(&mut opt.velocity) {
        let g = grads.grad(var);
        sgd_step(
            param.data_mut(),
            g.data(),
            velocity,
            lr,
            hp.momentum,
            hp.weight_decay,
        )?;
    }
    Ok(loss_val)
}

struct ArchOpt {
    normal: AdamState,
    reduce: Option<AdamState>,
}

impl ArchOpt {
    fn new(arch: &ArchParams) -> Self {
        ArchOpt {
            normal: AdamState::new(arch.normal.numel()),
            reduce: arch.reduce.as_ref().map(|r| AdamState::new(r.numel())),
        }
    }
}

fn arch_step(
    net: &Supernet,
    arch: &mut ArchParams,
    batch: &Batch,
    beta: f64,
    hp: &ArchHp,
    opt: &mut ArchOpt,
) -> Result<f64> {
    if batch.tag != SplitTag::Val {
        return Err(Error::InvalidConfig(
            "architecture step received a non-val batch".into(),
        ));
    }
    let tape = crate::tape::Tape::new();
    let lifted = net.lift(&tape, false);
    let arch_vars = net.lift_arch(&tape, arch, true);
    let (loss, _) = net.loss_and_accuracy(&tape, &lifted, &arch_vars, batch, beta)?;
    let loss_val = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    adam_step(
        arch.normal.data_mut(),
        grads.grad(arch_vars.normal).data(),
        &mut opt.normal,
        hp.lr,
        hp.beta1,
        hp.beta2,
        hp.eps,
        hp.weight_decay,
    )?;
    if let (Some(reduce), Some(var)) = (arch.reduce.as_mut(), arch_vars.reduce) {
        adam_step(
            reduce.data_mut(),
            grads.grad(var).data(),
            opt.reduce.as_mut().expect("reduce optimizer state"),
            hp.lr,
            hp.beta1,
            hp.beta2,
            hp.eps,
            hp.weight_decay,
        )?;
    }
    Ok(loss_val)
}

/// Mean loss and accuracy of the supernet over a whole split, evaluated in
/// deterministic batch order.
pub fn evaluate(
    net: &Supernet,
    arch: &ArchParams,
    data: &Dataset,
    beta: f64,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    let indices = data.all_indices();
    for chunk in indices.chunks(batch_size) {
        let batch = data.batch(chunk);
        let tape = crate::tape::Tape::new();
        let lifted = net.lift(&tape, false);
        let arch_vars = net.lift_arch(&tape, arch, false);
        let (loss, acc) = net.loss_and_accuracy(&tape, &lifted, &arch_vars, &batch, beta)?;
        loss_sum += tape.value(loss).item()? * chunk.len() as f64;
        correct += acc * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, correct / n))
}

/// Run the alternating bi-level search on `dataset`.
///
/// Per epoch `e` (1-based) the auxiliary coefficient is
/// `schedule.beta_at(e)`; each of the `floor(min(|train|,|val|)/batch)`
/// paired iterations takes one weight step then one architecture step.
/// Returns the final parameters, the parameters at the epoch with the best
/// validation accuracy (earlier epoch wins ties), and the full trajectory.
pub fn run_search(config: &SearchConfig, dataset: &Dataset) -> Result<SearchResult> {
    config.validate()?;
    let (train, val) = split_dataset(dataset, config.split_ratio, config.seed)?;
    let steps = train.len().min(val.len()) / config.batch_size;
    if steps == 0 {
        return Err(Error::InvalidConfig(format!(
            "empty epoch: splits of {} / {} samples cannot fill a batch of {}",
            train.len(),
            val.len(),
            config.batch_size
        )));
    }

    let mut init_rng = rng::stream(config.seed, "init");
    let mut net = Supernet::init(
        &config.space,
        dataset.image_shape[0],
        dataset.num_classes,
        config.aux,
        &mut init_rng,
    )?;
    let mut arch = ArchParams::init(&config.space, &mut init_rng);
    let mut weight_opt = WeightOpt::new(&net);
    let mut arch_opt = ArchOpt::new(&arch);
    let mut search_rng = rng::stream(config.seed, "search");

    // Fixed validation batch set for the per-epoch eigenvalue estimate.
    let hessian_batch = config.track_hessian.then(|| {
        let mut idx = epoch_order(val.len(), &mut rng::stream(config.seed, "hessian"));
        idx.truncate(config.hessian_samples.min(val.len()));
        val.batch(&idx)
    });

    let mut trajectory = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ArchParams, Supernet)> = None;

    for epoch in 1..=config.epochs {
        let beta = config.schedule.beta_at(epoch)?;
        let lr = cosine_lr(config.weight.lr, config.weight.lr_min, epoch, config.epochs);
        let train_order = epoch_order(train.len(), &mut search_rng);
        let val_order = epoch_order(val.len(), &mut search_rng);
        let mut train_loss = 0.0;
        let mut val_loss = 0.0;
        for step in 0..steps {
            let tb = train.batch(&train_order[step * config.batch_size..(step + 1) * config.batch_size]);
            train_loss += weight_step(&mut net, &arch, &tb, beta, lr, &config.weight, &mut weight_opt)
                .map_err(|e| e.with_context(format!("epoch {epoch} step {step} (weight)")))?;
            let vb = val.batch(&val_order[step * config.batch_size..(step + 1) * config.batch_size]);
            val_loss += arch_step(&net, &mut arch, &vb, beta, &config.arch, &mut arch_opt)
                .map_err(|e| e.with_context(format!("epoch {epoch} step {step} (arch)")))?;
        }
        let (_, val_acc) = evaluate(&net, &arch, &val, beta, config.batch_size)
            .map_err(|e| e.with_context(format!("epoch {epoch} (evaluation)")))?;

        let max_eig = match &hessian_batch {
            Some(batch) => Some(
                crate::diagnostics::hessian_max_eig(
                    &net,
                    &arch,
                    batch,
                    beta,
                    config.hessian_iters,
                    config.hessian_tol,
                    rng::derive_seed(config.seed, "hessian/start"),
                )?
                .value,
            ),
            None => None,
        };

        trajectory.push(EpochRecord {
            epoch,
            beta,
            train_loss: train_loss / steps as f64,
            val_loss: val_loss / steps as f64,
            val_acc,
            max_eig,
            edge_weights: arch.normal_weights(),
        });
        let better = best.as_ref().map_or(true, |(acc, _, _, _)| val_acc > *acc);
        if better {
            best = Some((val_acc, epoch, arch.clone(), net.clone()));
        }
    }

    let (_, best_epoch, best_arch, best_supernet) = best.expect("at least one epoch");
    Ok(SearchResult {
        final_arch: arch,
        best_arch,
        best_epoch,
        trajectory,
        supernet: net,
        best_supernet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minibench::SyntheticSpec;

    fn tiny_config(beta0: f64, seed: u64) -> (SearchConfig, Dataset) {
        let space = SearchSpaceSpec::minibench_default();
        let schedule = BetaSchedule::linear(beta0, 3);
        let mut cfg = SearchConfig::new(space, schedule, seed);
        cfg.batch_size = 16;
        let data = SyntheticSpec {
            train_samples: 96,
            val_samples: 32,
            ..SyntheticSpec::default()
        }
        .generate_train(seed);
        (cfg, data)
    }

    #[test]
    fn zero_arch_lr_leaves_alpha_at_init() {
        let (mut cfg, data) = tiny_config(1.0, 5);
        cfg.epochs = 1;
        cfg.schedule = BetaSchedule::linear(1.0, 1);
        cfg.arch.lr = 0.0;
        let result = run_search(&cfg, &data).unwrap();
        let mut rng = rng::stream(5, "init");
        let _ = Supernet::init(&cfg.space, 1, 4, cfg.aux, &mut rng).unwrap();
        let expected = ArchParams::init(&cfg.space, &mut rng);
        assert_eq!(result.final_arch.normal, expected.normal);
    }

    #[test]
    fn search_is_seed_deterministic() {
        let (cfg, data) = tiny_config(1.0, 9);
        let a = run_search(&cfg, &data).unwrap();
        let b = run_search(&cfg, &data).unwrap();
        assert_eq!(a.final_arch.normal, b.final_arch.normal);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn beta_zero_schedules_agree_bitwise() {
        // With beta0 = 0 the auxiliary branch is compiled out of the forward
        // pass; any zero schedule must give the identical run.
        let (cfg_linear, data) = tiny_config(0.0, 11);
        let mut cfg_const = cfg_linear.clone();
        cfg_const.schedule.kind = crate::schedules::DecayKind::Constant;
        let a = run_search(&cfg_linear, &data).unwrap();
        let b = run_search(&cfg_const, &data).unwrap();
        assert_eq!(a.final_arch.normal, b.final_arch.normal);
        for (ra, rb) in a.trajectory.iter().zip(&b.trajectory) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
        }
    }

    #[test]
    fn beta_injection_follows_schedule() {
        let (cfg, data) = tiny_config(1.0, 13);
        let result = run_search(&cfg, &data).unwrap();
        assert_eq!(result.trajectory.len(), cfg.epochs);
        for record in &result.trajectory {
            assert_eq!(record.beta, cfg.schedule.beta_at(record.epoch).unwrap());
        }
    }

    #[test]
    fn steps_reject_mistagged_batches() {
        let (cfg, data) = tiny_config(1.0, 17);
        let (train, val) = split_dataset(&data, 0.5, 17).unwrap();
        let mut rng = rng::stream(17, "init");
        let mut net = Supernet::init(&cfg.space, 1, 4, cfg.aux, &mut rng).unwrap();
        let mut arch = ArchParams::init(&cfg.space, &mut rng);
        let mut wopt = WeightOpt::new(&net);
        let mut aopt = ArchOpt::new(&arch);
        let vb = val.batch(&[0, 1]);
        let tb = train.batch(&[0, 1]);
        assert!(weight_step(&mut net, &arch, &vb, 1.0, 0.01, &cfg.weight, &mut wopt).is_err());
        assert!(arch_step(&net, &mut arch, &tb, 1.0, &cfg.arch, &mut aopt).is_err());
        assert!(weight_step(&mut net, &arch, &tb, 1.0, 0.01, &cfg.weight, &mut wopt).is_ok());
        assert!(arch_step(&net, &mut arch, &vb, 1.0, &cfg.arch, &mut aopt).is_ok());
    }

    #[test]
    fn schedule_epoch_mismatch_is_rejected() {
        let (mut cfg, data) = tiny_config(1.0, 19);
        cfg.epochs = 5; // schedule still covers 3
        assert!(run_search(&cfg, &data).is_err());
    }

    #[test]
    fn oversized_batch_is_an_error() {
        let (mut cfg, data) = tiny_config(1.0, 23);
        cfg.batch_size = 10_000;
        assert!(run_search(&cfg, &data).is_err());
    }
}
