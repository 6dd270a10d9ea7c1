use ersc::harness::{
    ao_table, emit, fclt_sweep, simulate_run, variational_battery, Cell, ExperimentConfig, Format,
    OccupationHistogram, Report,
};
use proptest::prelude::*;
use std::fs;

const SMALL: &str = r#"
[params]
lambda = [0.5, 0.5]
lambda_hat = [0.0, 0.0]
mu = [1.0, 1.0]
mu_hat = [0.0, 0.0]
gamma = [0.7, 0.7]
kappa = [0.3, 0.3]

[experiment]
n_list = [4, 9]
margin = 4.0
grid_half_width = 3.0
grid_h = 0.25
simulate_n = 9
simulate_horizon = 5.0
tilts = 4
mc_replications = 200
bm_steps = 10
"#;

fn small(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text).unwrap()
}

fn column(report: &Report, table: &str, name: &str) -> Vec<f64> {
    report.table(table).unwrap().values(name).iter().map(|c| c.as_f64().unwrap()).collect()
}

/// Splits an emitted CSV file into its tables and parses each with a csv reader.
fn read_tables(text: &str) -> Vec<(String, Vec<String>, Vec<Vec<String>>)> {
    let mut out = Vec::new();
    for chunk in text.split("# table: ").skip(1) {
        let (name, body) = chunk.split_once('\n').unwrap();
        let mut rd = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(body.as_bytes());
        let header = rd.headers().unwrap().iter().map(str::to_string).collect();
        let rows = rd
            .records()
            .map(|r| r.unwrap().iter().map(str::to_string).collect())
            .collect();
        out.push((name.to_string(), header, rows));
    }
    out
}

fn same_cell(cell: &Cell, text: &str) -> bool {
    match cell {
        Cell::Num(v) => {
            let parsed: f64 = text.parse().unwrap();
            parsed.to_bits() == v.to_bits() || (v.is_nan() && parsed.is_nan())
        }
        Cell::Int(v) => text.parse::<i64>().unwrap() == *v,
        Cell::Bool(v) => text.parse::<bool>().unwrap() == *v,
        Cell::Text(s) => s == text,
    }
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let cfg = small(SMALL);
    let dir = tempfile::tempdir().unwrap();
    for report in [fclt_sweep(&cfg).unwrap(), simulate_run(&cfg).unwrap()] {
        let path = dir.path().join("out.csv");
        emit(&report, &path, Format::Csv, &cfg.preamble()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let tables = read_tables(&text);
        assert_eq!(tables.len(), report.tables.len());
        for ((name, header, rows), table) in tables.iter().zip(&report.tables) {
            assert_eq!(name, &table.name);
            assert_eq!(header, &table.columns);
            assert_eq!(rows.len(), table.rows.len());
            for (row, cells) in rows.iter().zip(&table.rows) {
                for (text, cell) in row.iter().zip(cells) {
                    assert!(same_cell(cell, text), "{cell:?} written as {text}");
                }
            }
        }
    }
}

#[test]
fn preamble_echoes_the_config_verbatim() {
    let cfg = small(SMALL).with_seed(42);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.txt");
    emit(&fclt_sweep(&cfg).unwrap(), &path, Format::Txt, &cfg.preamble()).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let echoed: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix("# config: "))
        .collect();
    let source: Vec<&str> = SMALL.lines().filter(|l| !l.is_empty()).collect();
    let echoed: Vec<&str> = echoed.into_iter().filter(|l| !l.is_empty()).collect();
    assert_eq!(echoed, source);
    assert!(text.lines().any(|l| l == "# seed = 42"));
}

#[test]
fn zero_cost_rows_vanish() {
    let cfg = small(&SMALL.replace("kappa = [0.3, 0.3]", "kappa = [0.0, 0.0]"));
    let report = ao_table(&cfg).unwrap();
    for v in column(&report, "ao", "prelimit_value") {
        assert_eq!(v, 0.0);
    }
    for v in column(&report, "ao", "hjb_value") {
        assert!(v.abs() <= 1e-8, "{v}");
    }
}

#[test]
fn diffusion_column_is_shared_and_relabeling_is_harmless() {
    let cfg = small(SMALL);
    let report = ao_table(&cfg).unwrap();
    let lam = column(&report, "ao", "hjb_value");
    assert!(lam.iter().all(|v| v.to_bits() == lam[0].to_bits()));
    assert_eq!(report.get("hjb_value").unwrap().as_f64().unwrap(), lam[0]);

    let swapped = ExperimentConfig::new(cfg.params.permuted(&[1, 0]).unwrap(), cfg.experiment.clone()).unwrap();
    let other = ao_table(&swapped).unwrap();
    for name in ["prelimit_value", "hjb_value"] {
        for (a, b) in column(&report, "ao", name).iter().zip(column(&other, "ao", name)) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn outputs_reproduce_from_config_and_seed() {
    let cfg = small(SMALL).with_seed(7);
    assert_eq!(simulate_run(&cfg).unwrap(), simulate_run(&cfg).unwrap());
    let (a, ca) = variational_battery(&cfg).unwrap();
    let (b, cb) = variational_battery(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(format!("{ca:?}"), format!("{cb:?}"));
    assert_eq!(ao_table(&cfg).unwrap(), ao_table(&cfg).unwrap());
    let other = small(SMALL).with_seed(8);
    assert_ne!(simulate_run(&cfg).unwrap(), simulate_run(&other).unwrap());
}

#[test]
fn parallel_and_sequential_runs_agree() {
    let par = small(SMALL);
    let seq = small(&SMALL.replace("[experiment]", "[experiment]\nsequential = true"));
    assert_eq!(ao_table(&par).unwrap().tables, ao_table(&seq).unwrap().tables);
    assert_eq!(variational_battery(&par).unwrap().0, variational_battery(&seq).unwrap().0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coarsening_keeps_mass_and_marginal_blocks(
        points in prop::collection::vec((-1.0f64..7.0, -1.0f64..5.0, 0.0f64..2.0), 1..80),
        factor in 1usize..4,
    ) {
        let mut h = OccupationHistogram::new(vec![0.0, 0.0], 0.5, vec![12, 8]).unwrap();
        let mut elapsed = 0.0;
        for &(x, y, dt) in &points {
            h.add(&[x, y], dt);
            elapsed += dt;
        }
        let inside: f64 = h.weights().iter().sum();
        prop_assert!((h.total() - elapsed).abs() <= 1e-9 * elapsed.max(1.0));
        prop_assert!((inside + h.overflow() - elapsed).abs() <= 1e-9 * elapsed.max(1.0));
        let c = h.coarsen(factor).unwrap();
        prop_assert_eq!(c.total(), h.total());
        for axis in 0..2 {
            let fine = h.marginal(axis);
            let coarse = c.marginal(axis);
            for (k, block) in fine.chunks(factor).enumerate() {
                let sum: f64 = block.iter().sum();
                prop_assert!((coarse[k] - sum).abs() <= 1e-9 * sum.max(1.0));
            }
        }
    }
}
