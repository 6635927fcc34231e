//! Generalisation grids, dataset unions and the derived row summaries.

mod common;

use bbsnet::bench::{
    drop, run_combinations, run_grid, single_dataset_specs, toy_corpora, union_spec, BenchConfig, Corpus, GridCell,
    GridRow, Metric,
};
use bbsnet::data_io::{SplitComponent, SplitSpec};
use bbsnet::metrics::EvalOptions;
use bbsnet::model::ModelConfig;
use bbsnet::synth::{generate, Style, SynthConfig};
use bbsnet::trainer::TrainConfig;
use std::collections::BTreeMap;

fn quick(iters: usize) -> BenchConfig {
    BenchConfig {
        model: ModelConfig::default(),
        train: TrainConfig::toy(32, iters, 0),
        eval: EvalOptions::default(),
    }
}

fn row(cells: &[(&str, f64, f64)], trained: &[&str]) -> GridRow {
    GridRow {
        name: trained.join("+"),
        spec: SplitSpec {
            train: trained
                .iter()
                .map(|d| SplitComponent { dataset: d.to_string(), count: 1, seed: 0 })
                .collect(),
            test: cells.iter().map(|c| c.0.to_string()).collect(),
        },
        cells: cells
            .iter()
            .map(|&(n, s, f)| (n.to_string(), GridCell { s_alpha: s, max_f: f }))
            .collect::<BTreeMap<_, _>>(),
        failed: None,
    }
}

/// The published NJU2K row: Self .902, Mean Others .810, Drop 10.2%.
#[test]
fn drop_reproduces_published_arithmetic() {
    let d = drop(0.902, 0.810);
    assert!((d - 0.092 / 0.902).abs() < 1e-15);
    assert_eq!(format!("{:.1}", 100.0 * d), "10.2");
}

#[test]
fn row_summaries_exclude_the_diagonal_from_mean_others() {
    let r = row(&[("A", 0.9, 0.8), ("B", 0.6, 0.5), ("C", 0.3, 0.2)], &["A"]);
    assert_eq!(r.self_score(Metric::SAlpha), Some(0.9));
    assert!((r.mean_others(Metric::SAlpha).unwrap() - 0.45).abs() < 1e-15);
    assert!((r.drop(Metric::SAlpha).unwrap() - 0.5).abs() < 1e-15);
    assert!((r.mean_others(Metric::MaxF).unwrap() - 0.35).abs() < 1e-15);

    // a union row averages its own test sets into Self
    let u = row(&[("A", 0.9, 0.8), ("B", 0.7, 0.5), ("C", 0.4, 0.2)], &["A", "B"]);
    assert!((u.self_score(Metric::SAlpha).unwrap() - 0.8).abs() < 1e-15);
    assert_eq!(u.mean_others(Metric::SAlpha), Some(0.4));

    // trained on everything: nothing to compare against
    let all = row(&[("A", 0.9, 0.8)], &["A"]);
    assert_eq!(all.mean_others(Metric::SAlpha), None);
    assert_eq!(all.drop(Metric::SAlpha), None);
}

#[test]
fn unions_drop_duplicate_datasets() {
    let corpora = toy_corpora(4, 32, 0).unwrap();
    let spec = union_spec(&corpora, &["toy_a".into(), "toy_b".into(), "toy_a".into()], 2, 3);
    let names: Vec<&str> = spec.train.iter().map(|c| c.dataset.as_str()).collect();
    assert_eq!(names, ["toy_a", "toy_b"]);
    assert_eq!(spec.test, ["toy_a", "toy_b"]);
}

/// A one-dataset combination is the same experiment as the grid row, and
/// re-running a row reproduces its cells exactly.
#[test]
fn singleton_combination_equals_grid_row() {
    let corpora = toy_corpora(6, 32, 1).unwrap();
    let cfg = quick(4);
    let specs = single_dataset_specs(&corpora, 4, 2);
    let grid = run_grid(&corpora, &specs[..1], &cfg).unwrap();
    let combo = run_combinations(&corpora, &[vec!["toy_a".into()]], 4, 2, &cfg).unwrap();
    assert_eq!(grid.rows[0].cells, combo.rows[0].cells);
    assert_eq!(grid.rows[0].cells.len(), 2);
    assert!(grid.rows[0].failed.is_none());

    let again = run_grid(&corpora, &specs[..1], &cfg).unwrap();
    for (k, c) in &grid.rows[0].cells {
        let d = &again.rows[0].cells[k];
        assert_eq!(c.s_alpha.to_bits(), d.s_alpha.to_bits());
        assert_eq!(c.max_f.to_bits(), d.max_f.to_bits());
    }
}

#[test]
fn failed_rows_are_recorded_and_reported() {
    let corpora = toy_corpora(3, 32, 2).unwrap();
    let specs = vec![
        SplitSpec {
            train: vec![SplitComponent { dataset: "toy_a".into(), count: 99, seed: 0 }],
            test: vec!["toy_a".into(), "toy_b".into()],
        },
        single_dataset_specs(&corpora, 2, 0).remove(1),
    ];
    let grid = run_grid(&corpora, &specs, &quick(1)).unwrap();
    assert_eq!(grid.rows.len(), 2);
    assert!(grid.rows[0].failed.as_deref().unwrap().contains("99"));
    assert!(grid.rows[1].failed.is_none());
    assert_eq!(grid.columns, ["toy_a", "toy_b"]);

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("grid.csv");
    grid.write_csv(&csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("train,test,s_alpha,max_f"));
    assert!(text.contains("toy_a,failed,"));
    assert!(text.contains("toy_b,drop,"));
    let back: bbsnet::bench::GeneralizationGrid = serde_json::from_str(&grid.to_json().unwrap()).unwrap();
    assert_eq!(back, grid);
    assert!(grid.to_string().contains("failed"));
}

/// Two corpora drawn from one style lose less across the split than a
/// pair of corpora with disjoint styles.
#[test]
fn no_shift_drops_less_than_a_style_shift() {
    let make = |name: &str, seed: u64| {
        let mut c = SynthConfig::new(Style::a(), 24, 32, seed);
        c.name = name.into();
        Corpus { name: name.into(), samples: generate(&c).unwrap() }
    };
    let same = [make("same_1", 40), make("same_2", 41)];
    let shifted = toy_corpora(24, 32, 40).unwrap();
    let cfg = quick(120);
    let no_shift = run_grid(&same, &single_dataset_specs(&same, 8, 0), &cfg).unwrap();
    let shift = run_grid(&shifted, &single_dataset_specs(&shifted, 8, 0), &cfg).unwrap();
    for (a, b) in no_shift.rows.iter().zip(&shift.rows) {
        let (d0, d1) = (a.drop(Metric::SAlpha).unwrap(), b.drop(Metric::SAlpha).unwrap());
        println!("{}: drop {d0:+.3} | {}: drop {d1:+.3}", a.name, b.name);
        assert!(d0.abs() < d1, "{} drops {d0:.3}, shifted {} only {d1:.3}", a.name, b.name);
    }
}
