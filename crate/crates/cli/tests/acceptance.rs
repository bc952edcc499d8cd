//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dmsort::appearance::{Embedding, TrackAppearance};
use dmsort::association::{solve_assignment, CostMatrix};
use dmsort::cmc::parse_transforms;
use dmsort::geometry::Point2D;
use dmsort::papermath::{ada_loss_gradient, random_active_triplet, random_unit, TripletSample};
use dmsort::sim::{embedding_distance_histogram, generate, mean_point_residual, preset, PRESETS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn(&Path) -> Outcome);

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dmsort"))
}

fn run(args: &[&str]) -> Result<Output, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`dmsort {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, seed: u64) -> Result<PathBuf, String> {
    let out = dir.join(name);
    run(&["simulate", "--preset", name, "--seed", &seed.to_string(), "--out", s(&out)])?;
    Ok(out)
}

fn parse_report(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().parse().unwrap()))
        .collect()
}

fn eval(gt: &Path, res: &Path, report: &Path) -> Result<BTreeMap<String, f64>, String> {
    run(&["eval", "--gt", s(gt), "--res", s(res), "--report", s(report)])?;
    Ok(parse_report(&fs::read_to_string(report).map_err(|e| e.to_string())?))
}

/// Tracks a simulated scene and scores it. `extra` picks the motion source
/// and any further flags.
fn track_and_eval(scene: &Path, tag: &str, extra: &[&str]) -> Result<BTreeMap<String, f64>, String> {
    let res = scene.join(format!("res_{tag}.txt"));
    let det = scene.join("det.txt");
    let emb = scene.join("emb.txt");
    let mut args = vec!["track", "--det", s(&det), "--emb", s(&emb), "--out", s(&res)];
    args.extend_from_slice(extra);
    run(&args)?;
    eval(&scene.join("gt.txt"), &res, &scene.join(format!("report_{tag}.txt")))
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reversibility(_: &Path) -> Outcome {
    let start = Instant::now();
    let out = run(&["mathcheck", "--suite", "revcol", "--seed", &SEED.to_string()])?;
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let err: f64 = text
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_error="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("no max_error in {text:?}"))?;
    let cases = text.contains("cases=100");
    check(cases && err <= 1e-12 && secs < 5.0, format!("max_error={err:.3e} cases=100:{cases} time={secs:.2}s"))
}

/// The loss restated directly from its definition for the finite-difference
/// oracle.
fn oracle_loss(a: &[f64], p: &[f64], n: &[f64], theta: f64, margin: f64) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    let th1 = (dot(a, p).clamp(-1.0, 1.0).acos() + theta).clamp(0.0, std::f64::consts::PI);
    let d1 = 1.0 - th1.cos();
    let d2 = 1.0 - dot(a, n);
    (d1 - d2 + margin).max(0.0).powi(2)
}

fn ada_gradient(_: &Path) -> Outcome {
    run(&["mathcheck", "--suite", "adaloss", "--seed", &SEED.to_string()])?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = random_active_triplet(8, &mut rng);
        let g = ada_loss_gradient(&t).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = g.a.iter().chain(&g.p).chain(&g.n).copied().collect();
        let mut fd = Vec::with_capacity(analytic.len());
        for which in 0..3 {
            for i in 0..8 {
                let mut plus = [t.a.clone(), t.p.clone(), t.n.clone()];
                let mut minus = plus.clone();
                plus[which][i] += h;
                minus[which][i] -= h;
                let f = |v: &[Vec<f64>; 3]| oracle_loss(&v[0], &v[1], &v[2], t.theta, t.alpha_margin);
                fd.push((f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
        let diff: f64 = analytic.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale =
            analytic.iter().map(|x| x * x).sum::<f64>().sqrt().max(fd.iter().map(|x| x * x).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(1e-12));
    }
    // a·p = 1 and a·n = -1 give d1 - d2 + margin = -2 + margin < 0
    let a = random_unit(8, &mut rng);
    let inactive = TripletSample { p: a.clone(), n: a.iter().map(|v| -v).collect(), a, theta: 0.0, alpha_margin: 0.1 };
    let g = ada_loss_gradient(&inactive).map_err(|e| e.to_string())?;
    let zero = g.a.iter().chain(&g.p).chain(&g.n).all(|&v| v == 0.0);
    check(worst <= 1e-4 && zero, format!("max_rel_error={worst:.3e} inactive_zero={zero}"))
}

fn uema(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let alpha = 0.9;
    let mut worst_identity: f64 = 0.0;
    for _ in 0..200 {
        let f = Embedding::raw((0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut one = TrackAppearance::new(16, alpha);
        one.uema_update(&f).unwrap();
        let mut many = TrackAppearance::new(16, alpha);
        for _ in 0..rng.random_range(2..60) {
            many.uema_update(&f).unwrap();
        }
        for got in [one.uema_unbiased().unwrap(), many.uema_unbiased().unwrap()] {
            for (x, y) in got.as_slice().iter().zip(f.as_slice()) {
                worst_identity = worst_identity.max((x - y).abs());
            }
        }
    }
    // i.i.d. observations with mean mu; the corrected average must be unbiased
    let mu = [0.3, -0.7, 1.1];
    let sigma = 0.5;
    let trials = 10_000;
    let mut worst_z: f64 = 0.0;
    for k in [1u32, 2, 5, 50] {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..trials {
            let mut t = TrackAppearance::new(3, alpha);
            for _ in 0..k {
                let obs: Vec<f64> = mu.iter().map(|m| m + sigma * (rng.random::<f64>() - 0.5) * 12f64.sqrt()).collect();
                t.uema_update(&Embedding::raw(obs).unwrap()).unwrap();
            }
            for (i, v) in t.uema_unbiased().unwrap().as_slice().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..3 {
            let n = trials as f64;
            let mean = sum[i] / n;
            let var = (sq[i] - n * mean * mean) / (n - 1.0);
            let se = (var / n).sqrt();
            worst_z = worst_z.max((mean - mu[i]).abs() / se);
        }
    }
    check(
        worst_identity <= 1e-12 && worst_z <= 3.0,
        format!("identity_error={worst_identity:.1e} worst_bias={worst_z:.2}se"),
    )
}

fn brute_force(m: &[Vec<f64>]) -> f64 {
    let rows = m.len();
    let cols = m[0].len();
    fn rec(m: &[Vec<f64>], r: usize, used: &mut Vec<bool>, left: usize, acc: f64, best: &mut f64) {
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        if m.len() - r < left {
            return;
        }
        // leave row r unassigned when rows outnumber columns
        rec(m, r + 1, used, left, acc, best);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                rec(m, r + 1, used, left - 1, acc + m[r][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(m, 0, &mut vec![false; cols], rows.min(cols), 0.0, &mut best);
    best
}

fn hungarian(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cardinality_ok = true;
    for _ in 0..1000 {
        let rows = rng.random_range(1..=7);
        let cols = rng.random_range(1..=7);
        let m: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let a = solve_assignment(&CostMatrix::from_rows(&m));
        cardinality_ok &= a.matches.len() == rows.min(cols);
        let got: f64 = a.matches.iter().map(|&(r, c)| m[r][c]).sum();
        worst = worst.max((got - brute_force(&m)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(cardinality_ok && worst <= 1e-9 && secs < 10.0, format!("max_cost_gap={worst:.1e} time={secs:.2}s"))
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics")
}

/// Splits a fixture into its `[gt]`, `[res]` and `[expect]` sections.
fn read_fixture(path: &Path) -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    let mut section = String::new();
    for line in fs::read_to_string(path).unwrap().lines() {
        if line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.to_string();
            out.entry(section.clone()).or_default();
        } else {
            let body = out.entry(section.clone()).or_default();
            body.push_str(line);
            body.push('\n');
        }
    }
    out
}

fn metrics_oracle(dir: &Path) -> Outcome {
    let mut fixtures: Vec<PathBuf> = fs::read_dir(fixtures_dir())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    fixtures.sort();
    let mut failures = Vec::new();
    for f in &fixtures {
        let name = f.file_stem().unwrap().to_str().unwrap();
        let sections = read_fixture(f);
        let gt = dir.join(format!("{name}_gt.txt"));
        let res = dir.join(format!("{name}_res.txt"));
        fs::write(&gt, &sections["gt"]).unwrap();
        fs::write(&res, &sections["res"]).unwrap();
        let got = eval(&gt, &res, &dir.join(format!("{name}_report.txt")))?;
        for (k, want) in parse_report(&sections["expect"]) {
            let v = got.get(&k).copied().unwrap_or(f64::NAN);
            if v.is_nan() || (v - want).abs() > 1e-6 {
                failures.push(format!("{name}:{k}={v} want {want}"));
            }
        }
    }
    let mut imperfect = Vec::new();
    for name in PRESETS {
        let scene = simulate(dir, name, SEED)?;
        let gt = scene.join("gt.txt");
        let r = eval(&gt, &gt, &scene.join("self_report.txt"))?;
        let perfect = ["mota", "idf1", "hota", "loca"].iter().all(|k| r[*k] == 1.0)
            && ["fp", "fn", "idsw", "frag"].iter().all(|k| r[*k] == 0.0);
        if !perfect {
            imperfect.push(name.to_string());
        }
    }
    check(
        fixtures.len() >= 10 && failures.is_empty() && imperfect.is_empty(),
        format!("fixtures={} mismatches={:?} imperfect_presets={:?}", fixtures.len(), failures, imperfect),
    )
}

fn cmc_closed_loop(dir: &Path) -> Outcome {
    let scene = simulate(dir, "jitter", SEED)?;
    let est = scene.join("estimated.txt");
    run(&["estimate-cmc", "--corr", s(&scene.join("correspondences.txt")), "--out", s(&est)])?;
    let read = |p: &Path| parse_transforms(&fs::read_to_string(p).unwrap()).unwrap();
    let truth = read(&scene.join("transforms.txt"));
    let estimated = read(&est);
    let grid: Vec<Point2D> = (0..=8)
        .flat_map(|i| (0..=4).map(move |j| Point2D { x: 240.0 * f64::from(i), y: 270.0 * f64::from(j) }))
        .collect();
    let mut total = 0.0;
    for (frame, t) in &truth {
        let e = estimated.get(frame).ok_or_else(|| format!("frame {frame} missing from estimate"))?;
        total += mean_point_residual(e, t, &grid);
    }
    let residual = total / truth.len() as f64;
    let with = track_and_eval(&scene, "cmc", &["--cmc", s(&est)])?;
    let without = track_and_eval(&scene, "identity", &["--cmc-identity"])?;
    let gap = with["idf1"] - without["idf1"];
    check(
        residual <= 0.5 && gap >= 0.10,
        format!("residual={residual:.4}px idf1 {:.4} vs {:.4} (gap {gap:.4})", with["idf1"], without["idf1"]),
    )
}

fn coff_separation(_: &Path) -> Outcome {
    let cfg = dmsort::sim::ScenarioConfig { seed: SEED, ..preset("calm").unwrap() };
    let bundle = generate(&cfg).map_err(|e| e.to_string())?;
    let (pos, neg) = embedding_distance_histogram(&bundle, 800.0, 2000);
    let frac = |v: &[f64], ok: &dyn Fn(f64) -> bool| v.iter().filter(|&&x| ok(x)).count() as f64 / v.len() as f64;
    let p = frac(&pos, &|x| x <= 0.28);
    let n = frac(&neg, &|x| x >= 0.95);
    check(
        !pos.is_empty() && !neg.is_empty() && p >= 0.95 && n >= 0.95,
        format!("positives<=0.28: {:.2}% negatives>=0.95: {:.2}%", 100.0 * p, 100.0 * n),
    )
}

fn beta_insensitivity(dir: &Path) -> Outcome {
    let scene = simulate(dir, "calm", SEED)?;
    let transforms = scene.join("transforms.txt");
    let mut scores = Vec::new();
    for beta in [200, 400, 800, 1600, 2000] {
        let cfg = scene.join(format!("beta_{beta}.cfg"));
        fs::write(&cfg, format!("beta={beta}\n")).unwrap();
        let r = track_and_eval(&scene, &format!("beta{beta}"), &["--cmc", s(&transforms), "--config", s(&cfg)])?;
        scores.push(r["idf1"]);
    }
    let hi = scores.iter().copied().fold(f64::MIN, f64::max);
    let lo = scores.iter().copied().fold(f64::MAX, f64::min);
    let shown: Vec<String> = scores.iter().map(|v| format!("{v:.4}")).collect();
    check(hi - lo <= 0.02, format!("idf1=[{}] spread={:.4}", shown.join(", "), hi - lo))
}

fn end_to_end(dir: &Path) -> Outcome {
    let mut slowest = Duration::ZERO;
    let mut calm = None;
    let mut occlusion = None;
    for name in PRESETS {
        let start = Instant::now();
        let scene = simulate(dir, name, SEED)?;
        let transforms = scene.join("transforms.txt");
        let plain = track_and_eval(&scene, "plain", &["--cmc", s(&transforms)])?;
        slowest = slowest.max(start.elapsed());
        match name {
            "calm" => calm = Some(plain),
            "occlusion" => {
                let interp = track_and_eval(&scene, "interp", &["--cmc", s(&transforms), "--interpolate"])?;
                occlusion = Some((plain["frag"], interp["frag"]));
            }
            _ => {}
        }
    }
    let calm = calm.ok_or("calm preset missing")?;
    let (frag_plain, frag_interp) = occlusion.ok_or("occlusion preset missing")?;
    check(
        calm["mota"] >= 0.95 && calm["idsw"] == 0.0 && frag_interp < frag_plain && slowest.as_secs_f64() < 60.0,
        format!(
            "calm mota={:.4} ids={} occlusion frag {} -> {} slowest_preset={:.2}s",
            calm["mota"],
            calm["idsw"],
            frag_plain,
            frag_interp,
            slowest.as_secs_f64()
        ),
    )
}

/// Runs the whole CLI pipeline into `root` and returns every file written.
fn pipeline_outputs(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    fs::create_dir_all(root).unwrap();
    let scene = simulate(root, "jitter", SEED)?;
    let corr = scene.join("correspondences.txt");
    run(&["estimate-cmc", "--corr", s(&corr), "--out", s(&scene.join("estimated.txt"))])?;
    let res = scene.join("res.txt");
    run(&[
        "track",
        "--det",
        s(&scene.join("det.txt")),
        "--emb",
        s(&scene.join("emb.txt")),
        "--cmc-corr",
        s(&corr),
        "--interpolate",
        "--out",
        s(&res),
    ])?;
    let out =
        run(&["eval", "--gt", s(&scene.join("gt.txt")), "--res", s(&res), "--report", s(&scene.join("report.txt"))])?;
    fs::write(scene.join("eval_stdout.txt"), out.stdout).unwrap();
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(&scene).unwrap() {
        let p = entry.unwrap().path();
        files.insert(p.file_name().unwrap().to_string_lossy().to_string(), fs::read(&p).unwrap());
    }
    Ok(files)
}

fn determinism(dir: &Path) -> Outcome {
    let a = pipeline_outputs(&dir.join("run_a"))?;
    let b = pipeline_outputs(&dir.join("run_b"))?;
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    check(
        a.len() == b.len() && differing.is_empty() && a.len() >= 8,
        format!("files={} differing={:?}", a.len(), differing),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("reversibility", reversibility),
        ("ada-loss gradient", ada_gradient),
        ("uema", uema),
        ("hungarian optimality", hungarian),
        ("metrics oracle", metrics_oracle),
        ("cmc closed loop", cmc_closed_loop),
        ("coff separation", coff_separation),
        ("beta insensitivity", beta_insensitivity),
        ("end-to-end baseline", end_to_end),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let tmp = tempfile::tempdir().unwrap();
        let outcome = f(tmp.path());
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        writeln!(stdout, "criterion {:>2} {:<22} {tag}  {detail}", i + 1, name).unwrap();
        if outcome.is_err() {
            failed.push(*name);
        }
    }
    stdout.flush().unwrap();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
