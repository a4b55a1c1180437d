//! End-to-end acceptance checks. Each prints one `criterion N: PASS|FAIL`
//! line before asserting.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use common::{asset, device, device_with, model, parallelism_options, random_blocks, random_branchy_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use voxflow::cli_report::DesignFile;
use voxflow::dse::objective;
use voxflow::model_ir::LayerOp;
use voxflow::perf_model::{build_workload_matrix, partition_time, throughput, total_time};
use voxflow::resource_model::feasible;
use voxflow::sdfg::equalize_merge_rates;
use voxflow::sim_oracle::{simulate, validate_suite, SimOptions};
use voxflow::{anneal, build_sdfg, model_workload, parse_model, Error, Problem, SaConfig, SdfOptions};

fn report(n: &str, ok: bool, detail: &str) {
    println!("criterion {n}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

fn voxflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voxflow"))
}

fn run_optimize(model_name: &str, device_name: &str, out: &std::path::Path, extra: &[&str]) -> i32 {
    let status = voxflow()
        .arg("optimize")
        .arg("--model")
        .arg(asset(&format!("models/{model_name}.json")))
        .arg("--device")
        .arg(asset(&format!("devices/{device_name}.json")))
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap();
    status.status.code().unwrap()
}

fn read_json(path: std::path::PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn timed_workload(name: &str) -> (f64, Duration) {
    let start = Instant::now();
    let text = std::fs::read_to_string(asset(&format!("models/{name}.json"))).unwrap();
    let g = model_workload(&parse_model(&text).unwrap());
    (g, start.elapsed())
}

#[test]
fn criterion_1a_c3d_workload() {
    let (g, t) = timed_workload("c3d");
    let err = (g - 38.61).abs() / 38.61;
    let ok = err <= 0.02 && t < Duration::from_secs(1);
    report("1a", ok, &format!("C3D {g:.3} GOps vs 38.61, error {:.2}%, {t:?}", err * 100.0));
    assert!(ok);
}

#[test]
fn criterion_1b_r2plus1d_workload() {
    let (g, t) = timed_workload("r2plus1d_18");
    let err = (g - 8.52).abs() / 8.52;
    let ok = err <= 0.05 && t < Duration::from_secs(1);
    report("1b", ok, &format!("R(2+1)D-18 {g:.3} GOps vs 8.52, error {:.2}%, {t:?}", err * 100.0));
    assert!(ok, "R(2+1)D-18 workload {g} is not within 5% of 8.52");
}

#[test]
fn criterion_2_throughput_identity() {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    for (m, d) in [("toy_chain", "zcu102"), ("toy_residual", "zc706"), ("toy_se", "toy"), ("sa_toy_b", "toy")] {
        let out = dir.path().join(m);
        assert_eq!(run_optimize(m, d, &out, &["--seed", "3"]), 0, "{m}");
        let r = read_json(out.join("report.json"));
        let clips = r["clips_per_s"].as_f64().unwrap();
        let w = r["workload_gops"].as_f64().unwrap();
        let gops = r["gops_per_s"].as_f64().unwrap();
        if clips * w != gops {
            println!("{m}: {clips} * {w} = {} != {gops}", clips * w);
            ok = false;
        }
    }
    // Internal consistency of the reference C3D row on ZCU102.
    let reference: f64 = 3.38 * 38.61;
    let rel = (reference - 130.84).abs() / 130.84;
    ok &= rel < 0.01;
    report("2", ok, &format!("clips*workload == GOps/s on 4 reports; reference row off by {:.2}%", rel * 100.0));
    assert!(ok);
}

#[test]
fn criterion_3_model_vs_oracle() {
    let start = Instant::now();
    let rows = validate_suite(100).unwrap();
    let t = start.elapsed();
    let worst = rows.iter().map(|(_, v)| v.error).fold(0.0, f64::max);
    let detail: Vec<String> = rows.iter().map(|(c, v)| format!("{c} {:.2}%", v.error * 100.0)).collect();
    let ok = rows.len() == 4 && worst < 0.05 && t < Duration::from_secs(60);
    report("3", ok, &format!("{}, {t:?}", detail.join(", ")));
    assert!(ok);
}

/// Best feasible objective over the whole design space.
fn brute_force(problem: &Problem) -> (f64, usize) {
    let n = problem.len();
    let options: Vec<_> = problem.layers.iter().map(parallelism_options).collect();
    let legal = problem.legal_cuts().to_vec();
    let mut best = f64::NEG_INFINITY;
    let mut count = 0;
    for mask in 0..(1usize << legal.len()) {
        let cuts: Vec<usize> = legal.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &c)| c).collect();
        let mut idx = vec![0usize; n];
        loop {
            let par = (0..n).map(|i| options[i][idx[i]]).collect();
            let dp = problem.evaluate(cuts.clone(), par).unwrap();
            count += 1;
            best = best.max(objective(&dp));
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < options[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }
    (best, count)
}

#[test]
fn criterion_4_annealing_quality() {
    let start = Instant::now();
    let cfg_text = std::fs::read_to_string(asset("configs/sa_default.json")).unwrap();
    let base = SaConfig::from_json(&cfg_text).unwrap();
    let mut ok = true;
    let mut details = Vec::new();
    for name in ["sa_toy_a", "sa_toy_b", "sa_toy_c"] {
        let problem = Problem::new(model(name), device("toy"), base.batch).unwrap();
        let (opt, points) = brute_force(&problem);
        assert!(points <= 10_000, "{name} has {points} design points");
        assert!(opt.is_finite(), "{name} has no feasible design");
        let hits = (0..10u64)
            .filter(|&seed| {
                let cfg = SaConfig { rng_seed: seed, ..base.clone() };
                let r = anneal(&problem, &cfg).unwrap();
                r.best_objective >= 0.95 * opt
            })
            .count();
        ok &= hits >= 9;
        details.push(format!("{name}: {points} points, {hits}/10"));
    }
    let t = start.elapsed();
    ok &= t < Duration::from_secs(300);
    report("4", ok, &format!("{}, {t:?}", details.join("; ")));
    assert!(ok);
}

#[test]
fn criterion_5_time_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    for _ in 0..20 {
        let batch = rng.random_range(1..=1000u64);
        let depth = rng.random_range(1..=1_000_000u64) as f64;
        let ii = rng.random_range(1..=10_000_000u64) as f64;
        let clock = rng.random_range(50..=400u64) as f64 * 1e6;
        let hand = (depth + ii * (batch - 1) as f64) / clock;
        ok &= partition_time(batch, depth, ii, clock) == hand;

        let parts: Vec<f64> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(1e-4..10.0)).collect();
        let t_r = rng.random_range(1e-3..0.2);
        let mut sum = 0.0;
        for p in &parts {
            sum += p;
        }
        let hand_total = sum + (parts.len() - 1) as f64 * t_r;
        ok &= total_time(&parts, t_r) == hand_total;

        let w = rng.random_range(0.01..100.0);
        let (gops, clips) = throughput(w, batch, hand_total);
        ok &= clips == batch as f64 / hand_total && gops == clips * w;

        // Reconfiguration share shrinks as the batch grows.
        let n_p = rng.random_range(2..=6u64);
        let t_r = rng.random_range(1e-3..0.2);
        let share = |b: u64| {
            let t: Vec<f64> = (0..n_p).map(|_| partition_time(b, depth, ii, clock)).collect();
            (n_p - 1) as f64 * t_r / total_time(&t, t_r)
        };
        let mut prev = share(1);
        for b in [2, 4, 16, 100, 1000] {
            let s = share(b);
            ok &= s < prev;
            prev = s;
        }
    }
    report("5", ok, "20 random tuples, amortisation strictly decreasing");
    assert!(ok);
}

#[test]
fn criterion_6_structural_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = Vec::new();
    for i in 0..1000 {
        let dag = random_branchy_model(&mut rng, i);
        let blocks = random_blocks(&dag, &mut rng);
        let gbps = [0.4, 3.2, 25.6, 1e6][rng.random_range(0..4)];
        let dev = device_with(1_000_000, 1_000_000, gbps);
        let g = build_sdfg(&blocks, &dag.arcs, &dev, SdfOptions::default()).unwrap();

        for (a, ch) in g.arcs.iter().enumerate() {
            for n in 0..g.nodes.len() {
                let gamma = g.gamma[[a, n]];
                let sign = if n == ch.consumer { -1.0 } else { 1.0 };
                let expect = sign * g.s[[a, n]] * g.r[[a, n]];
                if (gamma - expect).abs() > 1e-12 * expect.abs() {
                    failures.push(format!("{i}: gamma != S*R at ({a},{n})"));
                }
                let expect_nonzero = n == ch.producer || n == ch.consumer;
                if expect_nonzero != (gamma != 0.0) {
                    failures.push(format!("{i}: pattern wrong at ({a},{n})"));
                }
            }
            if !(g.gamma[[a, ch.producer]] > 0.0 && g.gamma[[a, ch.consumer]] < 0.0) {
                failures.push(format!("{i}: sign wrong on arc {a}"));
            }
        }

        let eq = equalize_merge_rates(&g);
        let eq2 = equalize_merge_rates(&eq);
        if eq.gamma != eq2.gamma || eq.arcs != eq2.arcs {
            failures.push(format!("{i}: equalisation not idempotent"));
        }

        let batch = 2;
        let w = build_workload_matrix(&g);
        match simulate(&g, &w, &SimOptions::new(batch)) {
            Ok(sim) => {
                for (a, ch) in g.arcs.iter().enumerate() {
                    let want = ch.elements * batch;
                    if sim.produced[a] != want || sim.consumed[a] != want {
                        failures.push(format!("{i}: arc {a} moved {}/{} of {want}", sim.produced[a], sim.consumed[a]));
                    }
                }
            }
            Err(e) => failures.push(format!("{i}: {e}")),
        }
    }
    let ok = failures.is_empty();
    report("6", ok, &format!("1000 graphs, {} failures", failures.len()));
    assert!(ok, "{:#?}", &failures[..failures.len().min(10)]);
}

/// DSP and block BRAM recomputed from the layer shapes.
fn independent_usage(layer: &voxflow::LayerDescriptor, s_i: u64, s_o: u64, p_mac: u64) -> (u64, u64) {
    let inp = layer.input_shapes[0];
    let (h, w, c) = (inp.height as u64, inp.width as u64, inp.channels as u64);
    let words_to_bram = |words: u64| words.div_ceil(1024);
    match &layer.op {
        LayerOp::Conv3d { window, groups } => {
            let [kh, kw, kd] = window.kernel.map(|k| k as u64);
            let depthwise = *groups > 1 && *groups == c as usize && *groups == layer.output_shape.channels;
            let dsp = if depthwise { s_i * p_mac } else { s_i * s_o * p_mac };
            let buffer = ((kd - 1) * h * w + (kh - 1) * w + kw) * c;
            let weights = c * layer.output_shape.channels as u64 * kh * kw * kd / *groups as u64;
            (dsp, words_to_bram(buffer + weights))
        }
        LayerOp::Pool3d { window } => {
            let [kh, kw, kd] = window.kernel.map(|k| k as u64);
            (0, words_to_bram(((kd - 1) * h * w + (kh - 1) * w + kw) * c))
        }
        LayerOp::Activation(voxflow::model_ir::ActivationType::Relu) => (0, 0),
        LayerOp::Activation(_) => (s_i, 0),
        LayerOp::ElementWise { op: voxflow::model_ir::EwType::Mul, .. } => (s_o, 0),
        LayerOp::ElementWise { .. } => (0, 0),
        LayerOp::GlobalAvgPool => (0, words_to_bram(c)),
    }
}

#[test]
fn criterion_7_feasibility() {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    for (m, d) in [("toy_chain", "zc706"), ("toy_residual", "toy"), ("toy_se", "toy"), ("sa_toy_b", "toy")] {
        let out = dir.path().join(m);
        assert_eq!(run_optimize(m, d, &out, &["--seed", "7"]), 0, "{m}");
        let rep = read_json(out.join("report.json"));
        let dev = device(d);
        let dag = model(m);
        let design = DesignFile::from_json(&std::fs::read_to_string(out.join("design.json")).unwrap()).unwrap();
        let problem = Problem::new(dag.clone(), dev.clone(), rep["batch"].as_u64().unwrap()).unwrap();
        let (cuts, par) = design.resolve(&problem).unwrap();
        let dp = problem.evaluate(cuts, par).unwrap();
        ok &= dp.feasible && dp.partitions.iter().all(|p| feasible(&p.resources, &dev));

        for p in rep["partitions"].as_array().unwrap() {
            let mut dsp = 0;
            let mut bram = 0;
            for b in p["blocks"].as_array().unwrap() {
                let layer = dag.layer(b["layer"].as_str().unwrap()).unwrap();
                let (x, y) = independent_usage(
                    layer,
                    b["s_i"].as_u64().unwrap(),
                    b["s_o"].as_u64().unwrap(),
                    b["p_mac"].as_u64().unwrap(),
                );
                dsp += x;
                bram += y;
            }
            let used_dsp = p["resources"]["dsp"].as_u64().unwrap();
            let used_bram = p["resources"]["bram18"].as_u64().unwrap();
            ok &= used_dsp == dsp && used_dsp <= dev.dsp_total;
            ok &= used_bram >= bram && used_bram <= dev.bram18_total;
        }
    }

    // One DSP cannot hold the gated branch of the SE toy.
    let tiny = dir.path().join("tiny.json");
    let mut dev: Value = read_json(asset("devices/toy.json"));
    dev["dsp"] = Value::from(1);
    std::fs::write(&tiny, dev.to_string()).unwrap();
    let out = dir.path().join("infeasible");
    let code = voxflow()
        .arg("optimize")
        .arg("--model")
        .arg(asset("models/toy_se.json"))
        .arg("--device")
        .arg(&tiny)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap();
    ok &= code == 2;
    let tiny_dev = voxflow::DeviceSpec::from_json(&std::fs::read_to_string(&tiny).unwrap()).unwrap();
    let problem = Problem::new(model("toy_se"), tiny_dev, 100).unwrap();
    ok &= matches!(anneal(&problem, &SaConfig::default()), Err(Error::NoFeasibleDesign(_)));
    report("7", ok, &format!("4 designs re-checked, dsp=1 exit code {code}"));
    assert!(ok);
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    for (m, d) in [("toy_residual", "zcu102"), ("sa_toy_c", "toy")] {
        let a = dir.path().join(format!("{m}_a"));
        let b = dir.path().join(format!("{m}_b"));
        assert_eq!(run_optimize(m, d, &a, &["--seed", "11"]), 0);
        assert_eq!(run_optimize(m, d, &b, &["--seed", "11", "--jobs", "4"]), 0);
        for f in ["report.json", "design.json", "trace.csv"] {
            ok &= std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
        }
    }
    report("8", ok, "same seed gives byte-identical report, design and trace");
    assert!(ok);
}
