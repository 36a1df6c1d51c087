//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p crowd-calib-cli --test acceptance`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crowd_calib::annotations::{split_dataset, SoftLabelMethod, SplitRatios};
use crowd_calib::distributions::{entropy, jsd, kl_divergence, tvd, DistanceMetric, ScoreSpec};
use crowd_calib::estimator::{
    direct_training_set, estimate_crowd, train_mlp, weighted_scoring, CrowdEstimator, Head, MlpConfig, MlpModel,
    Targets,
};
use crowd_calib::evaluation::{auc_accuracy_coverage, auroc_values, cov_at_acc, ece, sweep_values};
use crowd_calib::selector::{fit_temperature, scale_logits};
use crowd_calib::synthetic::{generate, ScenarioConfig};
use crowd_calib::ProbDist;
use crowd_calib_cli::manifest::run_all;
use crowd_calib_cli::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> ProbDist {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(1e-3..1.0)).collect();
    ProbDist::from_weights(&w).unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let k = [2, 3, 5][i % 3];
        let (p, q) = (random_dist(&mut rng, k), random_dist(&mut rng, k));
        let lhs = kl_divergence(&p, &q).unwrap() + entropy(&q);
        let rhs: f64 = p
            .iter()
            .zip(q.iter())
            .map(|(a, b)| a * a.ln() - a * b.ln() - b * b.ln())
            .sum();
        worst = worst.max((lhs - rhs).abs());
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e} over 1000 pairs"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ln2 = std::f64::consts::LN_2;
    for i in 0..1000 {
        let k = [2, 3, 5][i % 3];
        let (p, q, r) = (
            random_dist(&mut rng, k),
            random_dist(&mut rng, k),
            random_dist(&mut rng, k),
        );
        let kl = kl_divergence(&p, &q).unwrap();
        ensure(kl > 0.0, || format!("KL(p||q) = {kl} for distinct p, q"))?;
        ensure(kl_divergence(&p, &p).unwrap().abs() < 1e-12, || "KL(p||p) != 0".into())?;
        let (a, b) = (jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
        ensure((a - b).abs() < 1e-15, || format!("JSD asymmetric: {a} vs {b}"))?;
        ensure((0.0..=ln2 + 1e-12).contains(&a), || format!("JSD {a} out of range"))?;
        let (pq, qr, pr) = (tvd(&p, &q).unwrap(), tvd(&q, &r).unwrap(), tvd(&p, &r).unwrap());
        ensure((0.0..=1.0).contains(&pq), || format!("TVD {pq} out of range"))?;
        ensure(pr <= pq + qr + 1e-12, || {
            format!("triangle violated: {pr} > {pq} + {qr}")
        })?;
    }
    let one_hot = ProbDist::one_hot(2, 0).unwrap();
    let other = ProbDist::one_hot(2, 1).unwrap();
    ensure((jsd(&one_hot, &other).unwrap() - ln2).abs() < 1e-12, || {
        "JSD of disjoint one-hots != ln 2".into()
    })?;
    Ok("1000 random triples".into())
}

fn brute_keep(keep: &[f64], correct: &[bool], t: f64) -> (f64, f64) {
    let kept: Vec<bool> = keep
        .iter()
        .zip(correct)
        .filter(|(k, _)| **k >= t)
        .map(|(_, c)| *c)
        .collect();
    let hits = kept.iter().filter(|c| **c).count();
    (kept.len() as f64 / keep.len() as f64, hits as f64 / kept.len() as f64)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for inst in 0..200 {
        let n = rng.random_range(1..=20);
        let levels = rng.random_range(1..=10);
        let keep: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.1).collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let curve = sweep_values(&keep, &correct, &vec![0.0; n]).unwrap();

        let mut thresholds = keep.clone();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let brute: Vec<(f64, f64)> = thresholds.iter().map(|&t| brute_keep(&keep, &correct, t)).collect();
        ensure(curve.points.len() == thresholds.len() + 1, || {
            format!("instance {inst}: point count")
        })?;
        for ((p, &t), &(cov, acc)) in curve.points.iter().zip(&thresholds).zip(&brute) {
            ensure(p.threshold == t && p.coverage == cov && p.accuracy == Some(acc), || {
                format!("instance {inst}: point at {t} differs")
            })?;
        }
        let span = brute.last().unwrap().0 - brute[0].0;
        let area = if span == 0.0 {
            brute[0].1
        } else {
            brute
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
                .sum::<f64>()
                / span
        };
        ensure(auc_accuracy_coverage(&curve) == area, || {
            format!("instance {inst}: AUC differs")
        })?;
        for target in [0.5, 0.7, 0.9, 1.0] {
            let best = brute
                .iter()
                .filter(|(_, a)| *a >= target)
                .map(|(c, _)| *c)
                .fold(None, |b: Option<f64>, c| Some(b.map_or(c, |b| b.max(c))));
            ensure(cov_at_acc(&curve, target) == best, || {
                format!("instance {inst}: Cov@Acc={target} differs")
            })?;
        }
    }
    Ok("200 instances exact".into())
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=50);
        let keep: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if correct[i] && !correct[j] {
                    pairs += 1.0;
                    wins += if keep[i] > keep[j] {
                        1.0
                    } else if keep[i] == keep[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let fast = auroc_values(&keep, &correct).unwrap();
        if pairs == 0.0 {
            ensure(fast.is_none(), || "AUROC defined without both classes".into())?;
            continue;
        }
        worst = worst.max((fast.unwrap() - wins / pairs).abs());
        checked += 1;
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    let correct = [true, true, false, false];
    let separated = auroc_values(&[0.9, 0.8, 0.2, 0.1], &correct).unwrap();
    ensure(separated == Some(1.0), || {
        format!("separated scores gave {separated:?}")
    })?;
    let constant = auroc_values(&[0.5; 4], &correct).unwrap();
    ensure(constant == Some(0.5), || format!("constant scores gave {constant:?}"))?;
    Ok(format!("max deviation {worst:.1e} over {checked} instances"))
}

fn criterion_5() -> Outcome {
    // 20 samples per bin at confidence c, exactly 20c of them correct
    let mut probs = Vec::new();
    let mut gold = Vec::new();
    for (c, hits) in [(0.55, 11), (0.65, 13), (0.75, 15), (0.85, 17), (0.95, 19)] {
        for i in 0..20 {
            probs.push(ProbDist::new(vec![c, 1.0 - c]).unwrap());
            gold.push(if i < hits { 0 } else { 1 });
        }
    }
    let calibrated = ece(&probs, &gold, 10).unwrap();
    ensure(calibrated.abs() < 1e-9, || {
        format!("calibrated fixture ECE {calibrated:e}")
    })?;
    let wrong = vec![ProbDist::one_hot(2, 0).unwrap(); 10];
    let all_wrong = ece(&wrong, &[1; 10], 10).unwrap();
    ensure((all_wrong - 1.0).abs() < 1e-9, || format!("all-wrong ECE {all_wrong}"))?;
    Ok(format!("calibrated {calibrated:.1e}, all-wrong {all_wrong}"))
}

/// Largest relative error between analytic and central-difference
/// gradients, skipping parameters whose perturbation flips a ReLU.
fn gradient_error(rng: &mut ChaCha8Rng, head: Head, seed: u64) -> f64 {
    let input_dim = rng.random_range(1..=4);
    let output_dim = rng.random_range(2..=4);
    let depth = rng.random_range(1..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let config = MlpConfig {
        hidden_sizes: hidden,
        head,
        l2: rng.random_range(0.0..0.1),
        seed,
        ..MlpConfig::default()
    };
    let mut model = MlpModel::init(config, input_dim, output_dim).unwrap();
    // non-zero biases so the check covers them too
    let mut params = model.params();
    for p in params.iter_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    model.set_params(&params).unwrap();
    let n = rng.random_range(1..=8);
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let ys: Vec<ProbDist> = (0..n).map(|_| random_dist(rng, output_dim)).collect();
    let loss = |m: &MlpModel| m.loss_and_gradient(&xs, Targets::Dists(&ys)).unwrap();
    let (_, grad) = loss(&model);
    let patterns: Vec<Vec<bool>> = xs.iter().map(|x| model.activation_pattern(x).unwrap()).collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let shifted = |delta: f64| {
            let mut p = params.clone();
            p[i] += delta;
            let mut m = model.clone();
            m.set_params(&p).unwrap();
            let stable = xs
                .iter()
                .zip(&patterns)
                .all(|(x, pat)| &m.activation_pattern(x).unwrap() == pat);
            (loss(&m).0, stable)
        };
        let ((up, s1), (down, s2)) = (shifted(h), shifted(-h));
        if !(s1 && s2) {
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for head in [Head::ClassifierSoftmax, Head::RegressorLinear] {
        for seed in 0..20 {
            let e = gradient_error(&mut rng, head, seed);
            ensure(e < 1e-4, || {
                format!("{} network {seed}: relative error {e:e}", head.as_str())
            })?;
            worst = worst.max(e);
        }
    }
    Ok(format!("max relative error {worst:.1e} over 40 networks"))
}

/// Logits `z` and labels drawn from `softmax(z)`.
fn sampled_logits(seed: u64, n: usize, k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = ProbDist::softmax(&z).unwrap();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = k - 1;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                label = i;
                break;
            }
        }
        zs.push(z);
        labels.push(label);
    }
    (zs, labels)
}

fn ece_at(logits: &[Vec<f64>], gold: &[usize], t: f64) -> f64 {
    let probs: Vec<ProbDist> = logits.iter().map(|z| scale_logits(z, t).unwrap()).collect();
    ece(&probs, gold, 10).unwrap()
}

fn criterion_7() -> Outcome {
    let mut fitted = Vec::new();
    for seed in 0..5 {
        let (zs, gold) = sampled_logits(100 + seed, 5000, 3);
        let doubled: Vec<Vec<f64>> = zs.iter().map(|z| z.iter().map(|v| 2.0 * v).collect()).collect();
        let t = fit_temperature(&doubled, &gold).unwrap();
        ensure((1.8..=2.2).contains(&t), || format!("seed {seed}: T = {t:.4}"))?;
        let (before, after) = (ece_at(&doubled, &gold, 1.0), ece_at(&doubled, &gold, t));
        ensure(after < before, || {
            format!("seed {seed}: ECE {after:.4} not below {before:.4}")
        })?;
        fitted.push(format!("{t:.3}"));
    }
    Ok(format!("T = [{}]", fitted.join(", ")))
}

fn criterion_8() -> Outcome {
    let pd = |v: &[f64]| ProbDist::new(v.to_vec()).unwrap();
    let preds = [pd(&[0.95, 0.05]), pd(&[0.85, 0.15]), pd(&[0.3, 0.7]), pd(&[0.1, 0.9])];
    let ws = weighted_scoring(&preds, &pd(&[0.5, 0.5]), DistanceMetric::Tvd).unwrap();
    ensure((ws - 0.35).abs() < 1e-9, || format!("weighted TVD {ws}"))?;
    Ok(format!("{ws}"))
}

/// AUROC of JSD+E crowd-calibration and of MaxProb on one synthetic seed.
fn crowd_vs_maxprob(seed: u64) -> (f64, f64) {
    let scenario = generate(&ScenarioConfig {
        n: 2000,
        n_annotators: 50,
        annotations_per_item: 50,
        emit_annotations: false,
        seed,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let records = &scenario.dataset.records;
    let split = split_dataset(records, SplitRatios::new(0.6, 0.2, 0.2).unwrap(), seed).unwrap();
    let (xs, ys) = direct_training_set(&split.train, 2, SoftLabelMethod::Normalize).unwrap();
    let model = train_mlp(&xs, Targets::Dists(&ys), &MlpConfig::crowd_regressor(seed)).unwrap();
    let estimator = CrowdEstimator::Direct(model);
    let spec = ScoreSpec::new(DistanceMetric::Jsd, true);

    let mut crowd_keep = Vec::new();
    let mut maxprob_keep = Vec::new();
    let mut correct = Vec::new();
    for r in &split.test {
        let base = r.base_probs.as_ref().unwrap();
        let estimate = estimate_crowd(&estimator, r.features.as_ref().unwrap()).unwrap();
        crowd_keep.push(-estimate.score(spec, base).unwrap());
        maxprob_keep.push(base.max_prob());
        correct.push(base.argmax() == r.gold_label(2).unwrap());
    }
    (
        auroc_values(&crowd_keep, &correct).unwrap().unwrap(),
        auroc_values(&maxprob_keep, &correct).unwrap().unwrap(),
    )
}

fn criterion_9() -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let (crowd, maxprob) = crowd_vs_maxprob(seed);
        wins += (crowd > maxprob) as usize;
        detail.push(format!("{crowd:.3}/{maxprob:.3}"));
    }
    let summary = format!("{wins}/5 wins, JSD+E/MaxProb AUROC [{}]", detail.join(", "));
    ensure(wins >= 4, || summary.clone())?;
    Ok(summary)
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic")
}

/// Every file under `dir` except the manifest, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().is_some_and(|n| n != "manifest.json") {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn run_fixture(workdir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    for f in ["data.jsonl", "config.json"] {
        std::fs::copy(fixture_dir().join(f), workdir.join(f)).map_err(|e| e.to_string())?;
    }
    let mut loaded = RunConfig::load(&workdir.join("config.json")).map_err(|e| e.to_string())?;
    loaded.config.output_dir = workdir.join("out");
    run_all(&loaded).map_err(|e| e.to_string())?;
    Ok(snapshot(&workdir.join("out")))
}

fn criterion_10() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_fixture(a.path())?;
    let second = run_fixture(b.path())?;
    ensure(first.keys().eq(second.keys()), || {
        "runs produced different file sets".into()
    })?;
    for (path, bytes) in &first {
        ensure(&second[path] == bytes, || {
            format!("{} differs between runs", path.display())
        })?;
    }
    for dir in ["models", "report/curves"] {
        ensure(first.keys().any(|p| p.starts_with(dir)), || {
            format!("no files under {dir}")
        })?;
    }
    let golden = std::fs::read(fixture_dir().join("golden_report.json")).map_err(|e| e.to_string())?;
    ensure(first[Path::new("report/report.json")] == golden, || {
        "report.json differs from the golden report".into()
    })?;
    Ok(format!("{} files identical, golden report matches", first.len()))
}

fn criterion_11() -> Outcome {
    let (zs, gold) = sampled_logits(11, 5000, 4);
    let scaled_up: Vec<Vec<f64>> = zs.iter().map(|z| z.iter().map(|v| 3.0 * v).collect()).collect();
    let t = fit_temperature(&scaled_up, &gold).unwrap();
    let mut changed = 0;
    for z in &scaled_up {
        let before = ProbDist::softmax(z).unwrap().argmax();
        for temp in [t, 0.5, 1.0, 10.0] {
            changed += (scale_logits(z, temp).unwrap().argmax() != before) as usize;
        }
    }
    ensure(changed == 0, || format!("{changed} predictions changed"))?;
    Ok(format!("0 of 5000 changed at fitted T = {t:.3}"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("KL + H(Q) identity", criterion_1),
        ("distance axioms", criterion_2),
        ("sweep / AUC / Cov@Acc brute force", criterion_3),
        ("AUROC vs pair counting", criterion_4),
        ("ECE fixtures", criterion_5),
        ("MLP gradient check", criterion_6),
        ("temperature recovery", criterion_7),
        ("weighted scoring hand check", criterion_8),
        ("crowd calibration beats MaxProb", criterion_9),
        ("end-to-end determinism + golden", criterion_10),
        ("temperature keeps argmax", criterion_11),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
