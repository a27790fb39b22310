//! Memory-level ablations: one model per level subset and seed.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::model::ModelConfig;
use super::train::{evaluate, train, HeadAccuracy, TrainOptions};
use crate::error::{Error, Result};
use crate::toytask::Splits;

/// The seven rows of the level ablation: none, each single level, the two
/// adjacent pairs, and all three.
pub const TABLE_SUBSETS: [&[usize]; 7] = [&[], &[1], &[2], &[3], &[1, 2], &[2, 3], &[1, 2, 3]];

/// Test accuracies of one level subset across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub levels: Vec<usize>,
    pub seeds: Vec<u64>,
    pub test: Vec<HeadAccuracy>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl AblationRow {
    pub fn acc_va(&self) -> Vec<f64> {
        self.test.iter().map(|a| a.acc_va).collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.acc_va())
    }

    pub fn std(&self) -> f64 {
        sample_std(&self.acc_va())
    }

    pub fn label(&self) -> String {
        let parts: Vec<String> = self.levels.iter().map(usize::to_string).collect();
        format!("{{{}}}", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, levels: &[usize]) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.levels == levels)
    }

    /// One line per subset: level flags, accuracy of the fused head in
    /// percent (mean and sample std over seeds), the visual head's mean, and
    /// the per-seed fused accuracies.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mtlam1,mtlam2,mtlam3,mean_acc_va,std_acc_va,mean_acc_v,seed_acc_va\n");
        for r in &self.rows {
            let flags: Vec<&str> = (1..=3)
                .map(|l| if r.levels.contains(&l) { "1" } else { "0" })
                .collect();
            let acc_v: Vec<f64> = r.test.iter().map(|a| a.acc_v).collect();
            let per_seed: Vec<String> = r.acc_va().iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
            s.push_str(&format!(
                "{},{:.2},{:.2},{:.2},{}\n",
                flags.join(","),
                100.0 * r.mean(),
                100.0 * r.std(),
                100.0 * mean(&acc_v),
                per_seed.join(";")
            ));
        }
        s
    }
}

/// Train and test one model per `(subset, seed)`. All runs share `splits`
/// and differ only in memory levels and seed. Up to `threads` runs proceed in
/// parallel; results do not depend on the thread count.
pub fn ablate(
    base: &ModelConfig,
    subsets: &[Vec<usize>],
    seeds: &[u64],
    splits: &Splits,
    threads: usize,
) -> Result<AblationTable> {
    if subsets.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs subsets and seeds".into()));
    }
    let jobs: Vec<ModelConfig> = subsets
        .iter()
        .flat_map(|levels| {
            seeds.iter().map(move |&seed| {
                let mut cfg = base.clone();
                cfg.levels = levels.clone();
                cfg.train.seed = seed;
                cfg
            })
        })
        .collect();
    for cfg in &jobs {
        cfg.validate()?;
    }
    let results: Mutex<Vec<Option<Result<HeadAccuracy>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run = |cfg: &ModelConfig| -> Result<HeadAccuracy> {
        let out = train(cfg, &splits.train, &splits.val, TrainOptions::default())?;
        evaluate(&out.best.model()?, &splits.test)
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = jobs.get(i) else { break };
                let r = run(cfg);
                log::info!("ablation run {}/{} levels {:?} seed {} done", i + 1, jobs.len(), cfg.levels, cfg.train.seed);
                results.lock().expect("no poisoned runs")[i] = Some(r);
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned runs").into_iter();
    let mut rows = Vec::new();
    for levels in subsets {
        let mut test = Vec::new();
        for _ in seeds {
            test.push(results.next().flatten().expect("every job ran")?);
        }
        rows.push(AblationRow {
            levels: levels.clone(),
            seeds: seeds.to_vec(),
            test,
        });
    }
    Ok(AblationTable { rows })
}
