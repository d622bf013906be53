//! Acceptance criteria A1–A9. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

mod common;

use std::time::Instant;

use apslstm::autodiff::{Tape, Var};
use apslstm::data::{chronological_split, generate_synthetic, training_rows, window_samples, MinMaxScaler, SplitRatios, SyntheticSpec};
use apslstm::gradcheck::{check_gradients, weighted_sum, GradCheckReport};
use apslstm::graph::{symmetric_eigen, TRIVIAL_EIGENVALUE};
use apslstm::model::{decode, lstm_step, periodic_self_attention, spatial_self_attention, DecoderVars, LstmVars, QkvVars};
use apslstm::spectral::{aggregation_weights, dft_amplitudes, fold_to_periods, select_top_k, unfold_from_periods, PeriodDivision};
use apslstm::train::{compute_metrics, dataset_mse, evaluate, mse_loss, train, TrainConfig};
use apslstm::{ApsLstm, Execution, ModelConfig, Result, StationGraph, Tensor};
use common::{direct_dft, psa_loops, random_connected, rng, ssa_loops, uniform, Qkv};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

const EPS: f64 = 1e-5;
const REL: f64 = 1e-4;
const FLOOR: f64 = 1e-7;
const INSTANCES: usize = 20;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One randomized gradient-check case: input tensors and a scalar function.
fn op_case(name: &str, r: &mut ChaCha8Rng) -> (Vec<Tensor>, OpFn) {
    let w_out = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s);
    match name {
        "add" | "sub" | "mul" => {
            let broadcast = r.random::<bool>();
            let a = uniform(r, &[3, 4]);
            let b = if broadcast { uniform(r, &[4]) } else { uniform(r, &[3, 4]) };
            let w = w_out(r, &[3, 4]);
            let kind = name.to_string();
            (
                vec![a, b],
                Box::new(move |t, v| {
                    let y = match kind.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "sigmoid" | "tanh" | "scale" => {
            let a = uniform(r, &[5]).data().iter().map(|v| v * 3.0).collect();
            let w = w_out(r, &[5]);
            let kind = name.to_string();
            (
                vec![Tensor::from_vec(a)],
                Box::new(move |t, v| {
                    let y = match kind.as_str() {
                        "sigmoid" => t.sigmoid(v[0]),
                        "tanh" => t.tanh(v[0]),
                        _ => t.scale(v[0], -1.7),
                    };
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "matmul" => {
            let a = uniform(r, &[2, 3, 4]);
            let b = uniform(r, &[2, 4, 2]);
            let w = w_out(r, &[2, 3, 2]);
            (vec![a, b], Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &w)
            }))
        }
        "conv1d" => {
            let x = uniform(r, &[2, 6]);
            let k = uniform(r, &[3, 2, 3]);
            let b = uniform(r, &[3]);
            let w = w_out(r, &[3, 6]);
            (vec![x, k, b], Box::new(move |t, v| {
                let y = t.conv1d_same(v[0], v[1], v[2])?;
                weighted_sum(t, y, &w)
            }))
        }
        "conv2d" => {
            let x = uniform(r, &[2, 3, 4]);
            let k = uniform(r, &[2, 2, 3, 3]);
            let b = uniform(r, &[2]);
            let w = w_out(r, &[2, 3, 4]);
            (vec![x, k, b], Box::new(move |t, v| {
                let y = t.conv2d_same(v[0], v[1], v[2])?;
                weighted_sum(t, y, &w)
            }))
        }
        "softmax" => {
            let axis = r.random_range(0..2usize);
            let x = uniform(r, &[3, 4]);
            let w = w_out(r, &[3, 4]);
            (vec![x], Box::new(move |t, v| {
                let y = t.softmax(v[0], axis)?;
                weighted_sum(t, y, &w)
            }))
        }
        "reduce" => {
            let x = uniform(r, &[3, 4, 2]);
            let w1 = w_out(r, &[3, 2]);
            let w2 = w_out(r, &[4, 2]);
            (vec![x], Box::new(move |t, v| {
                let s = t.sum(v[0], 1)?;
                let m = t.mean(v[0], 0)?;
                let a = weighted_sum(t, s, &w1)?;
                let b = weighted_sum(t, m, &w2)?;
                let c = t.mean_all(v[0]);
                let ab = t.add(a, b)?;
                t.add(ab, c)
            }))
        }
        "fold_unfold" => {
            let t_len = r.random_range(4..14usize);
            let f = r.random_range(1..=t_len / 2);
            let d = PeriodDivision::new(t_len, f, 1.0).unwrap();
            let x = uniform(r, &[t_len, 2]);
            let wg = w_out(r, &[d.num_periods, d.period_len, 2]);
            let wx = w_out(r, &[t_len, 2]);
            (vec![x], Box::new(move |t, v| {
                let g = fold_to_periods(t, v[0], &d)?;
                let sg = t.scale(g, 1.0);
                let a = weighted_sum(t, sg, &wg)?;
                let back = unfold_from_periods(t, g, t_len)?;
                let b = weighted_sum(t, back, &wx)?;
                t.add(a, b)
            }))
        }
        "psa" => {
            let (pn, pl, n) = (3, 4, 2);
            let mut ins = vec![uniform(r, &[pn, pl, n])];
            for _ in 0..3 {
                ins.push(uniform(r, &[n, n, 3, 3]));
                ins.push(uniform(r, &[n]));
            }
            let w = w_out(r, &[pn, pl, n]);
            (ins, Box::new(move |t, v| {
                let p = QkvVars { q_w: v[1], q_b: v[2], k_w: v[3], k_b: v[4], v_w: v[5], v_b: v[6] };
                let (y, _) = periodic_self_attention(t, v[0], &p)?;
                weighted_sum(t, y, &w)
            }))
        }
        "ssa" => {
            let (tl, n) = (6, 3);
            let mut ins = vec![uniform(r, &[tl, n])];
            for _ in 0..3 {
                ins.push(uniform(r, &[n, n, 3]));
                ins.push(uniform(r, &[n]));
            }
            let w = w_out(r, &[tl, n]);
            (ins, Box::new(move |t, v| {
                let p = QkvVars { q_w: v[1], q_b: v[2], k_w: v[3], k_b: v[4], v_w: v[5], v_b: v[6] };
                let (y, _) = spatial_self_attention(t, v[0], &p)?;
                weighted_sum(t, y, &w)
            }))
        }
        "lstm_step" => {
            let (n, h) = (2, 3);
            let mut ins = vec![uniform(r, &[n]), uniform(r, &[h]), uniform(r, &[h])];
            for _ in 0..4 {
                ins.push(uniform(r, &[h + n, h]));
            }
            for _ in 0..4 {
                ins.push(uniform(r, &[h]));
            }
            let wh = w_out(r, &[h]);
            let wc = w_out(r, &[h]);
            (ins, Box::new(move |t, v| {
                let p = LstmVars {
                    w_f: v[3], w_i: v[4], w_o: v[5], w_c: v[6],
                    b_f: v[7], b_i: v[8], b_o: v[9], b_c: v[10],
                };
                let (hn, cn) = lstm_step(t, v[0], v[1], v[2], &p)?;
                let a = weighted_sum(t, hn, &wh)?;
                let b = weighted_sum(t, cn, &wc)?;
                t.add(a, b)
            }))
        }
        "decoder" => {
            let ins = vec![uniform(r, &[5]), uniform(r, &[5, 3]), uniform(r, &[3])];
            let w = w_out(r, &[3]);
            (ins, Box::new(move |t, v| {
                let y = decode(t, v[0], &DecoderVars { w: v[1], b: v[2] })?;
                weighted_sum(t, y, &w)
            }))
        }
        "mse" => {
            let ins = vec![uniform(r, &[6]), uniform(r, &[6])];
            (ins, Box::new(|t, v| mse_loss(t, v[0], v[1])))
        }
        other => panic!("no case {other}"),
    }
}

fn a1_gradients() -> Outcome {
    let ops = [
        "add", "sub", "mul", "scale", "sigmoid", "tanh", "matmul", "conv1d", "conv2d", "softmax", "reduce",
        "fold_unfold", "psa", "ssa", "lstm_step", "decoder", "mse",
    ];
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: (f64, &str) = (0.0, "-");
    let mut worst_abs: f64 = 0.0;
    let mut failed = Vec::new();
    let mut checked = 0;
    for op in ops {
        for _ in 0..INSTANCES {
            let (inputs, f) = op_case(op, &mut r);
            let rep: GradCheckReport = match check_gradients(&inputs, f, EPS, REL, FLOOR) {
                Ok(rep) => rep,
                Err(e) => {
                    failed.push(format!("{op}: {e}"));
                    continue;
                }
            };
            checked += rep.checked;
            worst_abs = worst_abs.max(rep.max_abs_err);
            if rep.max_rel_err > worst.0 && rep.max_abs_err > FLOOR {
                worst = (rep.max_rel_err, op);
            }
            if !rep.passed() && !failed.iter().any(|f: &String| f.starts_with(op)) {
                failed.push(format!("{op}: max rel {:.2e}", rep.max_rel_err));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failed.is_empty() && secs < 60.0;
    (
        ok,
        format!(
            "{} ops x {INSTANCES} instances, {checked} entries, worst abs err {worst_abs:.2e}, worst rel err above floor {:.2e} ({}), {secs:.1}s{}",
            ops.len(),
            worst.0,
            worst.1,
            if failed.is_empty() { String::new() } else { format!("; failures: {}", failed.join(", ")) }
        ),
    )
}

fn a2_spectral() -> Outcome {
    let mut r = rng(202);
    let mut max_err: f64 = 0.0;
    for t_len in 2..=64 {
        let x = uniform(&mut r, &[t_len, 3]);
        let fast = dft_amplitudes(&x).unwrap();
        for (a, b) in fast.values().iter().zip(direct_dft(&x)) {
            max_err = max_err.max((a - b).abs());
        }
    }
    let mut misses = Vec::new();
    let mut cases = 0;
    for t_len in [8usize, 12, 24] {
        for f in 1..=t_len / 2 {
            let x = Tensor::new(
                vec![t_len, 2],
                (0..t_len)
                    .flat_map(|t| {
                        (0..2).map(move |c| {
                            0.5 + (2.0 * std::f64::consts::PI * (f * t) as f64 / t_len as f64 + 0.3 * c as f64).cos()
                        })
                    })
                    .collect(),
            )
            .unwrap();
            let top = select_top_k(&dft_amplitudes(&x).unwrap(), 1).unwrap();
            cases += 1;
            if top[0].frequency != f {
                misses.push(format!("T={t_len} f={f} got {}", top[0].frequency));
            }
        }
    }
    (
        max_err < 1e-9 && misses.is_empty(),
        format!(
            "max |fft - direct| {max_err:.2e} over T=2..64; planted recovery {}/{cases}{}",
            cases - misses.len(),
            if misses.is_empty() { String::new() } else { format!(" misses {misses:?}") }
        ),
    )
}

fn a3_structure() -> Outcome {
    let mut r = rng(303);
    let mut notes = Vec::new();

    let mut roundtrip_ok = true;
    for t_len in 2..=40 {
        for f in 1..=t_len / 2 {
            let d = PeriodDivision::new(t_len, f, 1.0).unwrap();
            let x = uniform(&mut r, &[t_len, 3]);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let g = fold_to_periods(&mut tape, xv, &d).unwrap();
            let back = unfold_from_periods(&mut tape, g, t_len).unwrap();
            roundtrip_ok &= tape.value(back) == &x;
        }
    }
    notes.push(format!("fold/unfold exact: {roundtrip_ok}"));

    let g = common::star_graph(5);
    let mut identity_ok = true;
    for seed in 0..5 {
        let mut model = ApsLstm::new(ModelConfig::new(5), &g, seed).unwrap();
        model.zero_attention();
        let x = uniform(&mut r, &[12, 5]);
        identity_ok &= model.block_stack(&x).unwrap() == model.embedded_input(&x).unwrap();
    }
    notes.push(format!("zero-attention stack is identity: {identity_ok}"));

    let mut worst_row: f64 = 0.0;
    for seed in 0..5 {
        let model = ApsLstm::new(ModelConfig::new(5), &g, seed).unwrap();
        let x = uniform(&mut r, &[12, 5]).data().iter().map(|v| v * 3.0).collect();
        let (_, trace) = model.trace(&Tensor::new(vec![12, 5], x).unwrap()).unwrap();
        for slot in trace.blocks.iter().flatten() {
            for s in [&slot.psa_scores, &slot.ssa_scores].into_iter().flatten() {
                let width = *s.shape().last().unwrap();
                for row in s.data().chunks(width) {
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    notes.push(format!("max score row-sum deviation {worst_row:.1e}"));

    let mut worst_w: f64 = 0.0;
    for _ in 0..200 {
        let k = r.random_range(1..6);
        let divs: Vec<PeriodDivision> = (1..=k)
            .map(|f| PeriodDivision::new(12, f, r.random_range(0.0..50.0)).unwrap())
            .collect();
        worst_w = worst_w.max((aggregation_weights(&divs).iter().sum::<f64>() - 1.0).abs());
    }
    notes.push(format!("max aggregation weight-sum deviation {worst_w:.1e}"));

    (roundtrip_ok && identity_ok && worst_row <= 1e-12 && worst_w <= 1e-12, notes.join("; "))
}

fn a4_hand_traces() -> Outcome {
    let mut tape = Tape::new();
    let zero = |t: &mut Tape| t.constant(Tensor::zeros(&[2, 1]));
    let zb = |t: &mut Tape| t.constant(Tensor::zeros(&[1]));
    let p = LstmVars {
        w_f: zero(&mut tape),
        w_i: zero(&mut tape),
        w_o: zero(&mut tape),
        w_c: tape.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap()),
        b_f: zb(&mut tape),
        b_i: zb(&mut tape),
        b_o: zb(&mut tape),
        b_c: zb(&mut tape),
    };
    let x = tape.constant(Tensor::from_vec(vec![1.0]));
    let h0 = zb(&mut tape);
    let c0 = zb(&mut tape);
    let (h1, c1) = lstm_step(&mut tape, x, h0, c0, &p).unwrap();
    let (c1v, h1v) = (tape.value(c1).item(), tape.value(h1).item());
    // 0.5 * tanh(0.5 * tanh(1)); see the decisions ledger for the 0.18166 figure
    let lstm_ok = (c1v - 0.38080).abs() < 1e-5 && (h1v - 0.1816997).abs() < 1e-5;

    let mut r = rng(404);
    let mut psa_err: f64 = 0.0;
    let mut ssa_err: f64 = 0.0;
    for _ in 0..10 {
        let x = uniform(&mut r, &[3, 4, 2]);
        let ws: Vec<Tensor> = (0..3).map(|_| uniform(&mut r, &[2, 2, 3, 3])).collect();
        let bs: Vec<Tensor> = (0..3).map(|_| uniform(&mut r, &[2])).collect();
        let (want, want_scores) = psa_loops(&x, &Qkv { w: [&ws[0], &ws[1], &ws[2]], b: [&bs[0], &bs[1], &bs[2]] });
        let mut t = Tape::new();
        let xv = t.constant(x);
        let v: Vec<Var> = (0..3).flat_map(|i| [ws[i].clone(), bs[i].clone()]).map(|w| t.constant(w)).collect();
        let p = QkvVars { q_w: v[0], q_b: v[1], k_w: v[2], k_b: v[3], v_w: v[4], v_b: v[5] };
        let (y, s) = periodic_self_attention(&mut t, xv, &p).unwrap();
        psa_err = psa_err.max(t.value(y).max_abs_diff(&want));
        let flat: Vec<f64> = want_scores.into_iter().flatten().flatten().collect();
        psa_err = psa_err.max(t.value(s).max_abs_diff(&Tensor::new(vec![2, 3, 3], flat).unwrap()));

        let x = uniform(&mut r, &[6, 3]);
        let ws: Vec<Tensor> = (0..3).map(|_| uniform(&mut r, &[3, 3, 3])).collect();
        let bs: Vec<Tensor> = (0..3).map(|_| uniform(&mut r, &[3])).collect();
        let (want, want_scores) = ssa_loops(&x, &Qkv { w: [&ws[0], &ws[1], &ws[2]], b: [&bs[0], &bs[1], &bs[2]] });
        let mut t = Tape::new();
        let xv = t.constant(x);
        let v: Vec<Var> = (0..3).flat_map(|i| [ws[i].clone(), bs[i].clone()]).map(|w| t.constant(w)).collect();
        let p = QkvVars { q_w: v[0], q_b: v[1], k_w: v[2], k_b: v[3], v_w: v[4], v_b: v[5] };
        let (y, s) = spatial_self_attention(&mut t, xv, &p).unwrap();
        ssa_err = ssa_err.max(t.value(y).max_abs_diff(&want));
        let flat: Vec<f64> = want_scores.into_iter().flatten().collect();
        ssa_err = ssa_err.max(t.value(s).max_abs_diff(&Tensor::new(vec![3, 3], flat).unwrap()));
    }
    (
        lstm_ok && psa_err < 1e-10 && ssa_err < 1e-10,
        format!("lstm c1={c1v:.5} h1={h1v:.7}; psa vs loops {psa_err:.1e}; ssa vs loops {ssa_err:.1e}"),
    )
}

struct Prepared {
    graph: StationGraph,
    scaler: MinMaxScaler,
    train: Vec<apslstm::data::WindowSample>,
    val: Vec<apslstm::data::WindowSample>,
    test: Vec<apslstm::data::WindowSample>,
}

fn synthetic_splits() -> Prepared {
    let spec = SyntheticSpec {
        stations: 8,
        rows: 2000,
        periods: vec![4, 6],
        noise: 0.05,
        seed: 2,
        ..SyntheticSpec::default()
    };
    let (series, graph) = generate_synthetic(&spec).unwrap();
    let ratios = SplitRatios::default();
    let mut scaler = MinMaxScaler::new();
    scaler.fit(&series, training_rows(series.rows(), 12, 6, ratios).unwrap()).unwrap();
    let norm = scaler.transform(&series).unwrap();
    let samples = window_samples(&norm, 12, 6, graph.flow_station()).unwrap();
    let split = chronological_split(samples, ratios).unwrap();
    Prepared {
        graph,
        scaler,
        train: split.train,
        val: split.val,
        test: split.test,
    }
}

const EPOCHS: usize = 50;

fn fit(p: &Prepared, cfg: ModelConfig, seed: u64) -> (ApsLstm, f64, f64) {
    let exec = Execution::available();
    let model = ApsLstm::new(cfg, &p.graph, seed).unwrap();
    let initial = dataset_mse(&model, &p.train, exec).unwrap();
    let tc = TrainConfig {
        epochs: EPOCHS,
        batch_size: 200,
        lr: 0.01,
        seed,
        execution: exec,
    };
    let out = train(model, &p.train, &p.val, &tc).unwrap();
    let fin = dataset_mse(&out.model, &p.train, exec).unwrap();
    (out.model, initial, fin)
}

fn test_rmse(p: &Prepared, m: &ApsLstm) -> f64 {
    evaluate(m, &p.test, &p.scaler, p.graph.flow_station(), Execution::available())
        .unwrap()
        .report
        .average
        .rmse
}

fn plain_config() -> ModelConfig {
    let mut c = ModelConfig::new(8);
    c.blocks = 0;
    c.disable_psa = true;
    c.disable_ssa = true;
    c
}

fn a5_a6() -> (Outcome, Outcome) {
    let p = synthetic_splits();
    let start = Instant::now();
    let (aps2, init, fin) = fit(&p, ModelConfig::new(8), 2);
    let secs = start.elapsed().as_secs_f64();
    let a5 = (
        fin <= 0.5 * init && secs < 600.0,
        format!("train MSE {init:.4} -> {fin:.4} (ratio {:.3}) after {EPOCHS} epochs in {secs:.0}s", fin / init),
    );

    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in [1u64, 2, 3] {
        let aps_rmse = if seed == 2 {
            test_rmse(&p, &aps2)
        } else {
            test_rmse(&p, &fit(&p, ModelConfig::new(8), seed).0)
        };
        let plain_rmse = test_rmse(&p, &fit(&p, plain_config(), seed).0);
        if aps_rmse <= plain_rmse {
            wins += 1;
        }
        rows.push(format!("seed {seed}: aps {aps_rmse:.4} vs lstm {plain_rmse:.4}"));
    }
    let a6 = (wins >= 2, format!("APS wins {wins}/3 ({})", rows.join(", ")));
    (a5, a6)
}

fn a7_metrics() -> Outcome {
    let r1 = compute_metrics(&[vec![2.0], vec![4.0]], &[vec![1.0], vec![3.0]]).unwrap();
    let r2 = compute_metrics(&[vec![1.0], vec![1.0]], &[vec![0.5], vec![2.0]]).unwrap();
    let r3 = compute_metrics(&[vec![3.0, 7.0]], &[vec![3.0, 7.0]]).unwrap();
    let examples = r1.horizons[0].rmse == 1.0
        && r1.horizons[0].mae == 1.0
        && r2.horizons[0].mape == Some(0.5)
        && r3.average.rmse == 0.0
        && r3.average.mae == 0.0
        && r3.average.mape == Some(0.0);
    let mut r = rng(707);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..40);
        let truth: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(0.0..100.0)]).collect();
        let pred: Vec<Vec<f64>> = truth.iter().map(|t| vec![t[0] + r.random_range(-20.0..20.0)]).collect();
        let m = compute_metrics(&pred, &truth).unwrap();
        if m.horizons[0].rmse < m.horizons[0].mae {
            violations += 1;
        }
    }
    (
        examples && violations == 0,
        format!("hand examples exact: {examples}; RMSE < MAE in {violations}/1000 random sets"),
    )
}

fn a8_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let mut full = vec!["apslstm"];
        full.extend_from_slice(args);
        let cli = <apslstm::cli::Cli as clap::Parser>::try_parse_from(full).unwrap();
        apslstm::cli::execute(cli).map_err(|e| e.to_string())
    };
    let out = d.display().to_string();
    run(&["--out", &out, "synth", "--rows", "400"]).unwrap();
    let ds = d.join("synthetic.csv").display().to_string();
    let adj = d.join("adjacency.csv").display().to_string();
    let run_dir = d.join("run").display().to_string();
    let files = ["model.apsl", "metrics.json", "test_metrics.json", "history.csv"];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        run(&["--out", &run_dir, "--dataset", &ds, "--adjacency", &adj, "train", "--epochs", "3"]).unwrap();
        snapshots.push(files.map(|f| std::fs::read(d.join("run").join(f)).unwrap()));
    }
    let same = snapshots[0] == snapshots[1];
    (same, format!("two train runs byte-identical across {files:?}: {same}"))
}

fn a9_eigen() -> Outcome {
    let mut r = rng(909);
    let (mut worst_res, mut worst_orth): (f64, f64) = (0.0, 0.0);
    let mut bad_null = 0;
    let mut graphs = 0;
    for n in 2..=16 {
        for _ in 0..10 {
            let a = random_connected(&mut r, n);
            let g = StationGraph::new((0..n).map(|i| format!("s{i}")).collect(), a, 0).unwrap();
            let l = g.normalized_laplacian();
            let e = symmetric_eigen(&l).unwrap();
            for k in 0..n {
                for i in 0..n {
                    let lv: f64 = (0..n).map(|j| l.at(&[i, j]) * e.vectors.at(&[j, k])).sum();
                    worst_res = worst_res.max((lv - e.values[k] * e.vectors.at(&[i, k])).abs());
                }
                for k2 in 0..n {
                    let dot: f64 = (0..n).map(|i| e.vectors.at(&[i, k]) * e.vectors.at(&[i, k2])).sum();
                    let want = if k == k2 { 1.0 } else { 0.0 };
                    worst_orth = worst_orth.max((dot - want).abs());
                }
            }
            if e.values.iter().filter(|&&v| v < TRIVIAL_EIGENVALUE).count() != 1 {
                bad_null += 1;
            }
            graphs += 1;
        }
    }
    (
        worst_res < 1e-8 && worst_orth < 1e-8 && bad_null == 0,
        format!("{graphs} graphs N=2..16: max residual {worst_res:.1e}, max orthonormality dev {worst_orth:.1e}, wrong null-space count {bad_null}"),
    )
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let want = |id: &str| only.is_empty() || only.iter().any(|o| o == id);
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |id: &'static str, o: Outcome| {
        println!("{id} {}: {}", if o.0 { "PASS" } else { "FAIL" }, o.1);
        results.push((id, o));
    };
    if want("A1") {
        report("A1", a1_gradients());
    }
    if want("A2") {
        report("A2", a2_spectral());
    }
    if want("A3") {
        report("A3", a3_structure());
    }
    if want("A4") {
        report("A4", a4_hand_traces());
    }
    if want("A5") || want("A6") {
        let (a5, a6) = a5_a6();
        report("A5", a5);
        report("A6", a6);
    }
    if want("A7") {
        report("A7", a7_metrics());
    }
    if want("A8") {
        report("A8", a8_determinism());
    }
    if want("A9") {
        report("A9", a9_eigen());
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.0).map(|(id, _)| *id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: FAILED {failed:?}");
        std::process::exit(1);
    }
}
