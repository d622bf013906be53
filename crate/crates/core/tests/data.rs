mod common;

use std::fs;
use std::path::Path;

use apslstm::data::{
    chronological_split, generate_synthetic, interpolate_missing, load_station_csv, training_rows, window_samples,
    MinMaxScaler, SplitRatios, SyntheticSpec,
};
use apslstm::spectral::dft_amplitudes;
use apslstm::{Error, StationGraph, Tensor};

fn graph3() -> StationGraph {
    let mut a = Tensor::zeros(&[3, 3]);
    for (i, j) in [(0, 2), (1, 2)] {
        a.set(&[i, j], 1.0);
        a.set(&[j, i], 1.0);
    }
    StationGraph::new(vec!["r1".into(), "r2".into(), "flow".into()], a, 2).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn ingestion_reorders_and_marks_missing() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "d.csv",
        "timestamp,flow,r2,r1\n2020-01-01T00:00:00,5,NA,1\n2020-01-01 01:00:00,6,2,\n2020-01-01T02:00,7,3,3\n",
    );
    let s = load_station_csv(&p, &graph3()).unwrap();
    assert_eq!(s.rows(), 3);
    assert_eq!(s.station_names, vec!["r1", "r2", "flow"]);
    assert_eq!(s.column(2), vec![5.0, 6.0, 7.0]);
    assert!(s.missing[1]);
    assert!(s.missing[3]);
    let f = interpolate_missing(&s).unwrap();
    assert_eq!(f.column(0), vec![1.0, 2.0, 3.0]);
    assert_eq!(f.column(1), vec![2.0, 2.0, 3.0]);
}

#[test]
fn ingestion_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let g = graph3();
    let cases = [
        ("timestamp,r1,r2,rain9\n", "rain9"),
        ("timestamp,r1,r2\n", "flow"),
        ("timestamp,r1,r2,flow\n2020-01-01T01:00:00,1,1,1\n2020-01-01T00:00:00,1,1,1\n", "row 3"),
        ("timestamp,r1,r2,flow\n2020-01-01T00:00:00,1,1,1\n2020-01-01T02:00:00,1,1,1\n", "row 3"),
        ("timestamp,r1,r2,flow\n2020-01-01T00:00:00,1,x,1\n", "row 2"),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let p = write(dir.path(), &format!("c{i}.csv"), text);
        let err = load_station_csv(&p, &g).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains(needle), "{err} lacks {needle}");
    }
    assert!(load_station_csv(&dir.path().join("absent.csv"), &g).is_err());
}

#[test]
fn synthetic_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (s, g) = generate_synthetic(&SyntheticSpec {
        rows: 300,
        ..SyntheticSpec::default()
    })
    .unwrap();
    s.write_csv(&dir.path().join("d.csv")).unwrap();
    g.write_csv(&dir.path().join("a.csv")).unwrap();
    let g2 = StationGraph::from_csv(&dir.path().join("a.csv"), "flow").unwrap();
    assert_eq!(g, g2);
    let s2 = load_station_csv(&dir.path().join("d.csv"), &g2).unwrap();
    assert_eq!(s, s2);
}

#[test]
fn scaler_uses_training_rows_only() {
    let (s, _) = generate_synthetic(&SyntheticSpec {
        rows: 400,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let fit_rows = training_rows(s.rows(), 12, 6, SplitRatios::default()).unwrap();
    let mut train_only = MinMaxScaler::new();
    train_only.fit(&s, fit_rows).unwrap();
    let mut all = MinMaxScaler::new();
    all.fit(&s, s.rows()).unwrap();

    // push one late row above the training maximum
    let mut spiked = s.clone();
    let n = s.n_stations();
    let last = s.rows() - 1;
    spiked.values[last * n + n - 1] = 1e3;
    let mut spiked_train = MinMaxScaler::new();
    spiked_train.fit(&spiked, fit_rows).unwrap();
    assert_eq!(spiked_train, train_only);
    let mut spiked_all = MinMaxScaler::new();
    spiked_all.fit(&spiked, spiked.rows()).unwrap();
    assert_ne!(spiked_all, train_only);
    let z = train_only.transform(&spiked).unwrap();
    assert!(z.value(last, n - 1) > 1.0);
}

#[test]
fn targets_denormalize_to_raw_flow() {
    let (s, g) = generate_synthetic(&SyntheticSpec {
        rows: 200,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut sc = MinMaxScaler::new();
    sc.fit(&s, 150).unwrap();
    let z = sc.transform(&s).unwrap();
    let flow = g.flow_station();
    for w in window_samples(&z, 12, 6, flow).unwrap() {
        for (h, &v) in w.target.iter().enumerate() {
            let back = sc.invert(v, flow).unwrap();
            assert!((back - s.value(w.origin_index + 1 + h, flow)).abs() < 1e-9);
        }
        assert_eq!(w.input.at(&[11, flow]), z.value(w.origin_index, flow));
    }
}

#[test]
fn split_does_not_leak_targets() {
    let (s, g) = generate_synthetic(&SyntheticSpec {
        rows: 500,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let samples = window_samples(&s, 12, 6, g.flow_station()).unwrap();
    let n = samples.len();
    let sp = chronological_split(samples, SplitRatios::default()).unwrap();
    assert_eq!(sp.train.len() + sp.val.len() + sp.test.len(), n);
    let last_train_target = sp.train.last().unwrap().origin_index + 6;
    let first_test_input = sp.test[0].origin_index + 1 - 12;
    assert!(last_train_target < sp.test[0].origin_index);
    assert!(sp.train.last().unwrap().origin_index < first_test_input);
    // the scaler's fit rows are exactly the rows the training samples touch
    assert_eq!(training_rows(s.rows(), 12, 6, SplitRatios::default()).unwrap(), last_train_target + 1);
}

#[test]
fn noiseless_single_period_peaks_at_expected_bin() {
    for p in [2usize, 3, 4, 6, 12] {
        let (s, _) = generate_synthetic(&SyntheticSpec {
            rows: 240,
            periods: vec![p],
            noise: 0.0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for start in [0usize, 37, 101] {
            let amps = dft_amplitudes(&s.window(start, 12).unwrap()).unwrap();
            let peak = (1..=6).max_by(|&a, &b| amps.values()[a].total_cmp(&amps.values()[b])).unwrap();
            assert_eq!(peak, (12.0 / p as f64).round() as usize, "p={p} start={start}");
        }
    }
}

#[test]
fn noiseless_lag_maximizes_cross_correlation() {
    let (s, g) = generate_synthetic(&SyntheticSpec {
        rows: 2000,
        noise: 0.0,
        lag: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let flow = s.column(g.flow_station());
    let corr = |a: &[f64], b: &[f64]| {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    };
    for j in 0..g.n_stations() - 1 {
        let rain = s.column(j);
        let best = (0..=10usize)
            .max_by(|&a, &b| {
                let ca = corr(&rain[..rain.len() - a], &flow[a..]);
                let cb = corr(&rain[..rain.len() - b], &flow[b..]);
                ca.total_cmp(&cb)
            })
            .unwrap();
        assert_eq!(best, 2, "rain column {j}");
    }
}
