//! Variant-by-seed sweep comparing supervision schemes on fresh corpora.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use sadkit::envkit::{evaluate_policy, generate_corpus, DifficultyMix};
use sadkit::metrics::{MetricsBundle, OverlapMode};
use sadkit::model::init_params;
use sadkit::segmenter::SegmentationRules;
use sadkit::trainer::{corpus_vocab, prepare, train, Teacher, TrainConfig, Variant};

use crate::{ensure_dir, to_json, write_file, CliError, CliResult};

/// Row label of the untrained baseline.
pub const UNTRAINED: &str = "untrained";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Shared training config; `variant` and `seed` are set per cell.
    pub train: TrainConfig,
    pub base_seed: u64,
    pub seeds: usize,
    pub corpus_size: usize,
    pub episodes: usize,
    pub mix: DifficultyMix,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            base_seed: 0,
            seeds: 5,
            corpus_size: 2000,
            episodes: 200,
            mix: DifficultyMix::default(),
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: String,
    pub seed: u64,
    pub tsr: f64,
    pub arl: f64,
    pub cot_match: f64,
    pub avg_steps: f64,
    pub n: usize,
    /// Training plus evaluation time of this cell.
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: usize,
    pub tsr: f64,
    pub tsr_min: f64,
    pub tsr_max: f64,
    pub arl: f64,
    pub cot_match: f64,
    pub avg_steps: f64,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
    /// Corpus generation and preprocessing time per seed.
    pub setup_secs: Vec<f64>,
}

impl ExperimentReport {
    pub fn row(&self, variant: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant)
    }

    pub fn mean_tsr(&self, variant: &str) -> Option<f64> {
        self.row(variant).map(|r| r.tsr)
    }

    pub fn results_csv(&self) -> String {
        let mut s = String::from("variant,seed,tsr,arl,cot_match,avg_steps,n,secs\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.3}",
                c.variant, c.seed, c.tsr, c.arl, c.cot_match, c.avg_steps, c.n, c.secs
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,seeds,tsr,tsr_min,tsr_max,arl,cot_match,avg_steps,secs\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.3}",
                r.variant, r.seeds, r.tsr, r.tsr_min, r.tsr_max, r.arl, r.cot_match, r.avg_steps, r.secs
            );
        }
        s
    }

    /// Fixed-width comparison table.
    pub fn table(&self) -> String {
        let header = ["variant", "TSR %", "min", "max", "ARL", "CoT %", "steps"];
        let rows: Vec<[String; 7]> = self
            .summary
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    format!("{:.2}", r.tsr),
                    format!("{:.1}", r.tsr_min),
                    format!("{:.1}", r.tsr_max),
                    format!("{:.2}", r.arl),
                    format!("{:.2}", r.cot_match),
                    format!("{:.2}", r.avg_steps),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut s = String::new();
        let line = |cells: &[&str], s: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            s.push_str(parts.join("  ").trim_end());
            s.push('\n');
        };
        line(&header, &mut s);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&rule.iter().map(String::as_str).collect::<Vec<_>>(), &mut s);
        for row in &rows {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>(), &mut s);
        }
        let _ = writeln!(
            s,
            "({} seeds from {}, {} training episodes, {} eval episodes, difficulty {})",
            self.config.seeds, self.config.base_seed, self.config.corpus_size, self.config.episodes, self.config.mix
        );
        s
    }
}

fn summarize(cells: &[Cell]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<usize, (String, Vec<&Cell>)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for c in cells {
        let key = match order.iter().position(|v| *v == c.variant) {
            Some(k) => k,
            None => {
                order.push(c.variant.clone());
                order.len() - 1
            }
        };
        groups.entry(key).or_insert_with(|| (c.variant.clone(), Vec::new())).1.push(c);
    }
    groups
        .into_values()
        .map(|(variant, cs)| {
            let n = cs.len() as f64;
            let mean = |f: fn(&Cell) -> f64| cs.iter().map(|c| f(c)).sum::<f64>() / n;
            SummaryRow {
                variant,
                seeds: cs.len(),
                tsr: mean(|c| c.tsr),
                tsr_min: cs.iter().map(|c| c.tsr).fold(f64::INFINITY, f64::min),
                tsr_max: cs.iter().map(|c| c.tsr).fold(f64::NEG_INFINITY, f64::max),
                arl: mean(|c| c.arl),
                cot_match: mean(|c| c.cot_match),
                avg_steps: mean(|c| c.avg_steps),
                secs: cs.iter().map(|c| c.secs).sum(),
            }
        })
        .collect()
}

fn cell(variant: &str, seed: u64, m: MetricsBundle, secs: f64) -> Cell {
    Cell {
        variant: variant.to_string(),
        seed,
        tsr: m.tsr,
        arl: m.arl,
        cot_match: m.cot_match,
        avg_steps: m.avg_steps,
        n: m.n,
        secs,
    }
}

/// For each seed: generate a corpus, evaluate the untrained student, then
/// train and evaluate every requested variant. Writes the tables to `out`.
pub fn cmd_experiment(config: &ExperimentConfig, out: &Path) -> CliResult<ExperimentReport> {
    if config.seeds == 0 || config.corpus_size == 0 || config.episodes == 0 {
        return Err(CliError::Validation("seeds, corpus size and episodes must be positive".into()));
    }
    config.train.validate()?;
    let rules = SegmentationRules::default();
    let mut cells = Vec::new();
    let mut setup_secs = Vec::new();
    for seed in config.base_seed..config.base_seed + config.seeds as u64 {
        let t = Instant::now();
        let raw = generate_corpus(config.corpus_size, seed, &config.mix)?;
        let vocab = corpus_vocab(&raw, 1)?;
        let corpus = raw
            .iter()
            .map(|r| prepare(r, &rules, &vocab).map(|(p, _)| p))
            .collect::<sadkit::Result<Vec<_>>>()?;
        setup_secs.push(t.elapsed().as_secs_f64());

        let base = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let t = Instant::now();
        let untrained = init_params(base.model_config(&vocab))?;
        let results = evaluate_policy(&untrained, &vocab, &rules, config.episodes, seed, &config.mix)?;
        let m = MetricsBundle::from_episodes(&results, OverlapMode::Multiset)?;
        cells.push(cell(UNTRAINED, seed, m, t.elapsed().as_secs_f64()));

        for &variant in &config.variants {
            let t = Instant::now();
            let cfg = TrainConfig { variant, ..base.clone() };
            let teacher = Teacher::Scripted {
                epsilon: cfg.teacher_epsilon,
            };
            let (params, _) = train(&corpus, &vocab, &teacher, &cfg)?;
            let results = evaluate_policy(&params, &vocab, &rules, config.episodes, seed, &config.mix)?;
            let m = MetricsBundle::from_episodes(&results, OverlapMode::Multiset)?;
            let c = cell(variant.name(), seed, m, t.elapsed().as_secs_f64());
            info!("seed {seed} {variant}: tsr {:.1} ({:.1}s)", c.tsr, c.secs);
            cells.push(c);
        }
    }
    let report = ExperimentReport {
        config: config.clone(),
        summary: summarize(&cells),
        cells,
        setup_secs,
    };
    ensure_dir(out)?;
    write_file(&out.join("results.csv"), report.results_csv())?;
    write_file(&out.join("summary.csv"), report.summary_csv())?;
    write_file(&out.join("table.txt"), report.table())?;
    write_file(&out.join("experiment.json"), to_json(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(variant: &str, seed: u64, tsr: f64) -> Cell {
        Cell {
            variant: variant.into(),
            seed,
            tsr,
            arl: 1.0,
            cot_match: 50.0,
            avg_steps: 3.0,
            n: 10,
            secs: 1.0,
        }
    }

    #[test]
    fn summary_keeps_first_seen_order_and_averages() {
        let cells = [c("b", 0, 10.0), c("a", 0, 0.0), c("b", 1, 30.0), c("a", 1, 20.0)];
        let s = summarize(&cells);
        assert_eq!(s[0].variant, "b");
        assert_eq!(s[0].tsr, 20.0);
        assert_eq!((s[0].tsr_min, s[0].tsr_max), (10.0, 30.0));
        assert_eq!(s[1].tsr, 10.0);
        assert_eq!(s[1].seeds, 2);
    }

    #[test]
    fn table_columns_align() {
        let cells = [c("full", 0, 100.0), c("random-mask", 0, 5.0)];
        let report = ExperimentReport {
            config: ExperimentConfig::default(),
            summary: summarize(&cells),
            cells: cells.to_vec(),
            setup_secs: vec![0.0],
        };
        let table = report.table();
        let lines: Vec<&str> = table.lines().take(4).collect();
        let ends: Vec<usize> = lines.iter().map(|l| l.len()).collect();
        assert!(ends.windows(2).all(|w| w[0] == w[1]), "{table}");
        assert!(report.results_csv().starts_with("variant,seed,tsr"));
    }
}
