//! Scratch probe for tuning the benchmark defaults. Not part of the build.

use dartsmini_core::genotype::{CellType, Genotype, GenotypeEntry};
use dartsmini_core::minibench::*;
use dartsmini_core::schedules::BetaSchedule;
use dartsmini_core::search::SearchConfig;
use dartsmini_core::supernet::OpKind;
use std::time::Instant;

fn geno(ops: [Option<OpKind>; 3]) -> Genotype {
    let edges = dartsmini_core::supernet::SearchSpaceSpec::minibench_default().edges();
    Genotype::new(
        ops.iter()
            .enumerate()
            .filter_map(|(i, o)| {
                o.map(|op| GenotypeEntry {
                    cell: CellType::Normal,
                    edge: edges[i],
                    op,
                })
            })
            .collect(),
    )
    .unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("quick");
    let mut spec = BenchSpec::new(42);
    if let Ok(v) = std::env::var("BENCH_EPOCHS") {
        spec.budget.epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("BENCH_LR") {
        spec.budget.lr = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("BENCH_NOISE") {
        spec.dataset.noise = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("BENCH_AMP") {
        spec.dataset.ring_amp = v.parse().unwrap();
    }
    let train = spec.dataset.generate_train(spec.seed);
    let val = spec.dataset.generate_val(spec.seed);
    let s = OpKind::Skip;
    let c = OpKind::Conv3x3;

    if mode == "quick" || mode == "all" {
        let t0 = Instant::now();
        for (name, g) in [
            ("all-skip", geno([Some(s), Some(s), Some(s)])),
            ("all-conv", geno([Some(c), Some(c), Some(c)])),
            ("conv1-skip2", geno([Some(c), Some(s), Some(s)])),
            ("skip1-conv2", geno([Some(s), Some(c), Some(c)])),
            ("all-none", geno([None, None, None])),
            ("conv-edge01-only", geno([Some(c), None, None])),
        ] {
            let mut accs = Vec::new();
            for i in 0..3 {
                let seed =
                    dartsmini_core::rng::derive_seed(spec.seed, &format!("bench/train-seed{i}"));
                accs.push(train_genotype(&spec, &g, &train, &val, seed).unwrap());
            }
            println!(
                "{name:18} accs {:?} mean {:.3}",
                accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                accs.iter().sum::<f64>() / accs.len() as f64
            );
        }
        println!("genotype probe in {:?}", t0.elapsed());
    }

    if mode == "table" || mode == "all" {
        let t0 = Instant::now();
        let table = build_table(&spec).unwrap();
        println!("table build in {:?}", t0.elapsed());
        println!("separability: {:.3}", table.separability(&spec.space).unwrap());
        let mut rows: Vec<(usize, String, f64)> = table
            .entries
            .iter()
            .map(|(k, e)| (e.rank, k.clone(), e.mean_acc))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        for (rank, key, acc) in rows {
            println!("  rank {rank:2} acc {acc:.3}  {key}");
        }
    }

    if mode == "traj" {
        let cache = format!("/tmp/bench_table_{}.tsv", spec.spec_hash());
        let table = BenchTable::from_text(&std::fs::read_to_string(&cache).unwrap()).unwrap();
        let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
        let beta0: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
        let run_idx: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);
        let mut cfg = SearchConfig::new(
            spec.space.clone(),
            BetaSchedule::linear(beta0, epochs),
            42,
        );
        cfg.batch_size = 64;
        cfg.seed = dartsmini_core::rng::derive_seed(42, &format!("eval/run{run_idx}"));
        let data = spec.dataset.generate_train(spec.seed);
        let result = dartsmini_core::search::run_search(&cfg, &data).unwrap();
        for r in &result.trajectory {
            let w: Vec<String> = r
                .edge_weights
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|v| format!("{:.2}", v))
                        .collect::<Vec<_>>()
                        .join("/")
                })
                .collect();
            println!(
                "e{:02} beta {:.2} tl {:.3} vl {:.3} va {:.3}  {}",
                r.epoch, r.beta, r.train_loss, r.val_loss, r.val_acc, w.join("  ")
            );
        }
        let gb = dartsmini_core::genotype::derive_genotype(&result.best_arch, &cfg.space, 1).unwrap();
        let gf = dartsmini_core::genotype::derive_genotype(&result.final_arch, &cfg.space, 1).unwrap();
        println!("best@{} {} pct {:.3}", result.best_epoch, genotype_key(&gb), table.percentile(&gb).unwrap());
        println!("final    {} pct {:.3}", genotype_key(&gf), table.percentile(&gf).unwrap());
    }

    if mode == "search" || mode == "all" {
        let t0 = Instant::now();
        let cache = format!("/tmp/bench_table_{}.tsv", spec.spec_hash());
        let table = match std::fs::read_to_string(&cache) {
            Ok(text) => BenchTable::from_text(&text).unwrap(),
            Err(_) => {
                let t = build_table(&spec).unwrap();
                std::fs::write(&cache, t.to_text()).unwrap();
                t
            }
        };
        println!("table ready in {:?}", t0.elapsed());
        let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
        for beta0 in [0.0, 1.0] {
            let mut cfg = SearchConfig::new(
                spec.space.clone(),
                BetaSchedule::linear(beta0, epochs),
                42,
            );
            cfg.batch_size = std::env::var("SEARCH_BATCH").map(|v| v.parse().unwrap()).unwrap_or(64);
            if let Some(lr) = args.get(3) {
                cfg.weight.lr = lr.parse().unwrap();
            }
            if let Some(alr) = args.get(4) {
                cfg.arch.lr = alr.parse().unwrap();
            }
            if let Ok(v) = std::env::var("SEARCH_WLR_MIN") {
                cfg.weight.lr_min = v.parse().unwrap();
            }
            let t1 = Instant::now();
            let eval = evaluate_search(&cfg, &spec, &table, 5, 1).unwrap();
            println!(
                "beta0={beta0}: mean pct {:.3} (+-{:.3}) #P {:.2} #skip {:.2}  [{:?}]",
                eval.mean_percentile,
                eval.std_percentile,
                eval.mean_parametric,
                eval.mean_skips,
                t1.elapsed()
            );
            for row in &eval.rows {
                println!(
                    "   seed {:>20} pct {:.3} #P {} #skip {} best@{} {}",
                    row.seed, row.percentile, row.num_parametric, row.num_skips, row.best_epoch, row.genotype_key
                );
            }
        }
        println!("search probe in {:?}", t0.elapsed());
    }
}
