//! Cross-dataset generalisation: train-on-X / test-on-Y grids, dataset
//! unions, Self / Mean-Others / Drop summaries and the depth-utility
//! comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{materialize_split, Normalization, RgbdSample, SampleIndex, SampleRef, SplitComponent, SplitSpec};
use crate::metrics::{EvalOptions, MetricAccumulator, MetricReport};
use crate::model::{BbsNet, ModelConfig};
use crate::synth::{generate, Style, SynthConfig};
use crate::trainer::{train, TrainConfig};
use crate::{Error, Result};

/// An in-memory dataset.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub samples: Vec<RgbdSample>,
}

impl SampleIndex for Corpus {
    fn dataset_name(&self) -> &str {
        &self.name
    }

    fn sample_id(&self, index: usize) -> &str {
        &self.samples[index].id
    }

    fn num_samples(&self) -> usize {
        self.samples.len()
    }
}

/// Two generated corpora, `toy_a` and `toy_b`, with disjoint styles (see
/// [`Style`]) so that training on one and testing on the other is a
/// distribution shift.
pub fn toy_corpora(count: usize, side: usize, seed: u64) -> Result<Vec<Corpus>> {
    [("toy_a", Style::a()), ("toy_b", Style::b())]
        .into_iter()
        .enumerate()
        .map(|(i, (name, style))| {
            let mut cfg = SynthConfig::new(style, count, side, seed.wrapping_add(i as u64));
            cfg.name = name.to_string();
            Ok(Corpus {
                name: name.to_string(),
                samples: generate(&cfg)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

/// Scores `net`'s final maps on `samples`.
pub fn evaluate_model(net: &BbsNet, samples: &[&RgbdSample], norm: &Normalization, opts: &EvalOptions) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for chunk in samples.chunks(8) {
        let preds = net.predict(chunk, norm)?;
        for (p, s) in preds.iter().zip(chunk) {
            acc.add_pair(p.view(), s.gt.view(), opts)?;
        }
    }
    acc.finish()
}

fn resolve<'a>(corpora: &'a [Corpus], refs: &[SampleRef]) -> Result<Vec<&'a RgbdSample>> {
    refs.iter()
        .map(|r| {
            corpora
                .iter()
                .find(|c| c.name == r.dataset)
                .and_then(|c| c.samples.get(r.index))
                .ok_or_else(|| Error::Dataset(format!("{}[{}] not found", r.dataset, r.index)))
        })
        .collect()
}

/// Trains one model on the spec's training part.
pub fn train_on(corpora: &[Corpus], spec: &SplitSpec, cfg: &BenchConfig) -> Result<BbsNet> {
    let split = materialize_split(spec, corpora)?;
    let train_set: Vec<RgbdSample> = resolve(corpora, &split.train)?.into_iter().cloned().collect();
    let net = BbsNet::new(cfg.model.clone())?;
    train(&net, &train_set, &cfg.train, None)?;
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub s_alpha: f64,
    pub max_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    SAlpha,
    MaxF,
}

impl GridCell {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::SAlpha => self.s_alpha,
            Metric::MaxF => self.max_f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// Training datasets joined by `+`.
    pub name: String,
    pub spec: SplitSpec,
    /// Test dataset name to scores.
    pub cells: BTreeMap<String, GridCell>,
    pub failed: Option<String>,
}

/// Relative gap between in-distribution and out-of-distribution scores.
pub fn drop(self_score: f64, mean_others: f64) -> f64 {
    (self_score - mean_others) / self_score
}

impl GridRow {
    fn trained_on(&self) -> BTreeSet<&str> {
        self.spec.train.iter().map(|c| c.dataset.as_str()).collect()
    }

    /// Mean over test sets the row was trained on.
    pub fn self_score(&self, m: Metric) -> Option<f64> {
        let own = self.trained_on();
        mean(self.cells.iter().filter(|(k, _)| own.contains(k.as_str())).map(|(_, c)| c.get(m)))
    }

    /// Mean over test sets the row was not trained on.
    pub fn mean_others(&self, m: Metric) -> Option<f64> {
        let own = self.trained_on();
        mean(self.cells.iter().filter(|(k, _)| !own.contains(k.as_str())).map(|(_, c)| c.get(m)))
    }

    pub fn drop(&self, m: Metric) -> Option<f64> {
        Some(drop(self.self_score(m)?, self.mean_others(m)?))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationGrid {
    pub columns: Vec<String>,
    pub rows: Vec<GridRow>,
}

impl GeneralizationGrid {
    pub fn cell(&self, row: &str, col: &str) -> Option<&GridCell> {
        self.rows.iter().find(|r| r.name == row)?.cells.get(col)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long format: `train,test,s_alpha,max_f`, followed by `self`,
    /// `mean_others` and `drop` pseudo-columns per row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["train", "test", "s_alpha", "max_f"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for row in &self.rows {
            if let Some(err) = &row.failed {
                w.write_record([row.name.as_str(), "failed", err.as_str(), ""])?;
                continue;
            }
            for (col, c) in &row.cells {
                w.write_record([row.name.clone(), col.clone(), fmt(Some(c.s_alpha)), fmt(Some(c.max_f))])?;
            }
            for (label, f) in [
                ("self", GridRow::self_score as fn(&GridRow, Metric) -> Option<f64>),
                ("mean_others", GridRow::mean_others),
                ("drop", GridRow::drop),
            ] {
                w.write_record([
                    row.name.clone(),
                    label.to_string(),
                    fmt(f(row, Metric::SAlpha)),
                    fmt(f(row, Metric::MaxF)),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for GeneralizationGrid {
    /// Plain-text table of S-alpha / max-F per cell plus the row summary.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16}", "train \\ test")?;
        for c in &self.columns {
            write!(f, " {c:>15}")?;
        }
        writeln!(f, " {:>15} {:>15} {:>15}", "self", "mean others", "drop")?;
        for row in &self.rows {
            write!(f, "{:<16}", row.name)?;
            if let Some(err) = &row.failed {
                writeln!(f, " failed: {err}")?;
                continue;
            }
            for c in &self.columns {
                match row.cells.get(c) {
                    Some(cell) => write!(f, " {:>7.3}/{:<7.3}", cell.s_alpha, cell.max_f)?,
                    None => write!(f, " {:>15}", "-")?,
                }
            }
            for g in [GridRow::self_score as fn(&GridRow, Metric) -> Option<f64>, GridRow::mean_others] {
                match (g(row, Metric::SAlpha), g(row, Metric::MaxF)) {
                    (Some(a), Some(b)) => write!(f, " {a:>7.3}/{b:<7.3}")?,
                    _ => write!(f, " {:>15}", "-")?,
                }
            }
            match (row.drop(Metric::SAlpha), row.drop(Metric::MaxF)) {
                (Some(a), Some(b)) => writeln!(f, " {:>6.1}%/{:<6.1}%", 100.0 * a, 100.0 * b)?,
                _ => writeln!(f, " {:>15}", "-")?,
            }
        }
        Ok(())
    }
}

fn row_name(spec: &SplitSpec) -> String {
    spec.train.iter().map(|c| c.dataset.as_str()).collect::<Vec<_>>().join("+")
}

fn run_row(corpora: &[Corpus], spec: &SplitSpec, cfg: &BenchConfig) -> Result<BTreeMap<String, GridCell>> {
    let split = materialize_split(spec, corpora)?;
    let train_set: Vec<RgbdSample> = resolve(corpora, &split.train)?.into_iter().cloned().collect();
    let net = BbsNet::new(cfg.model.clone())?;
    train(&net, &train_set, &cfg.train, None)?;
    let mut cells = BTreeMap::new();
    for (name, refs) in &split.test {
        if refs.is_empty() {
            log::warn!("{}: no test samples left in {name}", row_name(spec));
            continue;
        }
        let r = evaluate_model(&net, &resolve(corpora, refs)?, &cfg.train.normalization, &cfg.eval)?;
        cells.insert(
            name.clone(),
            GridCell {
                s_alpha: r.s_alpha,
                max_f: r.max_f,
            },
        );
    }
    Ok(cells)
}

/// Trains one model per spec (all rows share the model seed) and scores it
/// on every test set of the spec. A row that fails is recorded, not fatal.
pub fn run_grid(corpora: &[Corpus], specs: &[SplitSpec], cfg: &BenchConfig) -> Result<GeneralizationGrid> {
    let mut columns: Vec<String> = Vec::new();
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        for t in &spec.test {
            if !columns.contains(t) {
                columns.push(t.clone());
            }
        }
        let name = row_name(spec);
        log::info!("grid row {name}");
        let row = match run_row(corpora, spec, cfg) {
            Ok(cells) => GridRow {
                name,
                spec: spec.clone(),
                cells,
                failed: None,
            },
            Err(e) => {
                log::error!("grid row {name} failed: {e}");
                GridRow {
                    name,
                    spec: spec.clone(),
                    cells: BTreeMap::new(),
                    failed: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    Ok(GeneralizationGrid { columns, rows })
}

/// Single-dataset rows: train on `count` samples of each corpus, test on
/// every corpus.
pub fn single_dataset_specs(corpora: &[Corpus], count: usize, seed: u64) -> Vec<SplitSpec> {
    let names: Vec<String> = corpora.iter().map(|c| c.name.clone()).collect();
    names
        .iter()
        .map(|n| SplitSpec {
            train: vec![SplitComponent {
                dataset: n.clone(),
                count,
                seed,
            }],
            test: names.clone(),
        })
        .collect()
}

/// Spec training on the union of `datasets` (duplicates dropped with a
/// warning), `count` samples each, tested on every corpus.
pub fn union_spec(corpora: &[Corpus], datasets: &[String], count: usize, seed: u64) -> SplitSpec {
    let mut seen = BTreeSet::new();
    let mut train = Vec::new();
    for d in datasets {
        if !seen.insert(d.clone()) {
            log::warn!("dataset {d} listed twice in a combination; using it once");
            continue;
        }
        train.push(SplitComponent {
            dataset: d.clone(),
            count,
            seed,
        });
    }
    SplitSpec {
        train,
        test: corpora.iter().map(|c| c.name.clone()).collect(),
    }
}

/// One grid row per dataset combination.
pub fn run_combinations(
    corpora: &[Corpus],
    combinations: &[Vec<String>],
    count: usize,
    seed: u64,
    cfg: &BenchConfig,
) -> Result<GeneralizationGrid> {
    let specs: Vec<SplitSpec> = combinations
        .iter()
        .map(|c| union_spec(corpora, c, count, seed))
        .collect();
    run_grid(corpora, &specs, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthUtilityReport {
    pub with_depth: MetricReport,
    pub without_depth: MetricReport,
}

impl DepthUtilityReport {
    pub fn s_alpha_gain(&self) -> f64 {
        self.with_depth.s_alpha - self.without_depth.s_alpha
    }
}

/// Trains and evaluates twice on the same split and seeds: once as is and
/// once with every depth map (train and test) set to zero.
pub fn depth_utility(corpus: &Corpus, count: usize, seed: u64, cfg: &BenchConfig) -> Result<DepthUtilityReport> {
    let spec = SplitSpec {
        train: vec![SplitComponent {
            dataset: corpus.name.clone(),
            count,
            seed,
        }],
        test: vec![corpus.name.clone()],
    };
    let zeroed = Corpus {
        name: corpus.name.clone(),
        samples: corpus.samples.iter().map(RgbdSample::without_depth).collect(),
    };
    let run = |c: &Corpus| -> Result<MetricReport> {
        let corpora = std::slice::from_ref(c);
        let split = materialize_split(&spec, corpora)?;
        let net = train_on(corpora, &spec, cfg)?;
        let test = resolve(corpora, &split.test[&c.name])?;
        evaluate_model(&net, &test, &cfg.train.normalization, &cfg.eval)
    };
    Ok(DepthUtilityReport {
        with_depth: run(corpus)?,
        without_depth: run(&zeroed)?,
    })
}
