//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scf_core::casebank::{write_bank, CaseRecord};
use scf_core::evalkit::{paired_t_test, parse_reward_curve, score_test_set, tail_mean, top_ngrams};
use scf_core::experiment::{train_on_bank, Checkpoint};
use scf_core::forest::{linear_group_advantages, Forest, ForestConfig, NodeId, Role};
use scf_core::policy::{PolicyParams, StateId};
use scf_core::sim::{GameSpec, SimEnv};
use scf_core::trainer::{self, objective, policy_gradient, read_export, write_export, Sample, TrainConfig};
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn scf(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_scf"))
        .args(args)
        .env("SCF_STUB_KEY", "stub-key")
        .output()
        .map_err(|e| format!("cannot run scf: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "scf {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(out)
}

fn path(p: &Path) -> &str {
    p.to_str().expect("temporary paths are UTF-8")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pop_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn graded_forest(cfg: ForestConfig, rewards: &[f64]) -> Forest {
    let mut f = Forest::build_skeleton(cfg, "case").unwrap();
    let leaves: Vec<NodeId> = f.leaf_doctors().map(|n| n.node_id).collect();
    for (leaf, r) in leaves.into_iter().zip(rewards) {
        f.set_leaf_reward(leaf, *r).unwrap();
    }
    f
}

fn leaf_rewards_below(f: &Forest, id: NodeId, out: &mut Vec<f64>) {
    let node = f.node(id).unwrap();
    if node.role == Role::Doctor && node.depth == f.config.depth {
        out.push(node.reward_raw.unwrap());
    }
    for &c in node.children() {
        leaf_rewards_below(f, c, out);
    }
}

fn forest_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let cfg = ForestConfig {
            branching: rng.gen_range(1..=4),
            trees_per_case: rng.gen_range(1..=4),
            depth: rng.gen_range(1..=3),
            normalization_epsilon: 1e-8,
        };
        let rewards: Vec<f64> = (0..cfg.leaves())
            .map(|_| if rng.gen_bool(0.5) { [0.0, 0.5, 1.0][rng.gen_range(0..3)] } else { rng.gen() })
            .collect();
        let mut f = graded_forest(cfg, &rewards);
        let table = f.compute_advantages().map_err(|e| e.to_string())?;

        let mut groups: BTreeMap<Option<NodeId>, Vec<f64>> = BTreeMap::new();
        for node in f.doctor_nodes() {
            let grandparent = node.parent_id.and_then(|p| f.node(p).unwrap().parent_id);
            groups.entry(grandparent).or_default().push(node.reward_relative.unwrap());
            if node.depth < cfg.depth {
                let mut below = Vec::new();
                leaf_rewards_below(&f, node.node_id, &mut below);
                let err = (node.reward_raw.unwrap() - mean(&below)).abs();
                ensure!(err < 1e-12, "trial {trial}: parent {} off its leaf mean by {err:e}", node.node_id);
            }
        }
        for (parent, rel) in &groups {
            let sum: f64 = rel.iter().sum();
            ensure!(sum.abs() < 1e-12, "trial {trial}: group under {parent:?} sums to {sum:e}");
        }
        for depth in 1..=cfg.depth {
            let level: Vec<_> = f.doctors_at(depth).collect();
            let rel: Vec<f64> = level.iter().map(|n| n.reward_relative.unwrap()).collect();
            let adv: Vec<f64> = level.iter().map(|n| table.get(n.node_id).unwrap()).collect();
            if pop_std(&rel) > cfg.normalization_epsilon {
                ensure!(
                    mean(&adv).abs() < 1e-9 && (pop_std(&adv) - 1.0).abs() < 1e-9,
                    "trial {trial}: depth {depth} mean {:e} std {}",
                    mean(&adv),
                    pop_std(&adv)
                );
            } else {
                ensure!(adv.iter().all(|&a| a == 0.0), "trial {trial}: degenerate depth {depth} not zeroed");
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("1000 forests in {secs:.2}s"))
}

fn grpo_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let cfg = ForestConfig {
            branching: 1,
            trees_per_case: rng.gen_range(1..=16),
            depth: rng.gen_range(1..=3),
            normalization_epsilon: 1e-8,
        };
        let rewards: Vec<f64> = (0..cfg.trees_per_case)
            .map(|_| if trial % 2 == 0 { [0.0, 0.5, 1.0][rng.gen_range(0..3)] } else { rng.gen() })
            .collect();
        let mut f = graded_forest(cfg, &rewards);
        let table = f.compute_advantages().map_err(|e| e.to_string())?;
        let expected = linear_group_advantages(&rewards, cfg.normalization_epsilon).map_err(|e| e.to_string())?;
        for (root, want) in f.roots().iter().zip(&expected) {
            worst = worst.max((table.get(*root).unwrap() - want).abs());
        }
    }
    ensure!(worst < 1e-12, "max deviation {worst:e}");
    Ok(format!("200 reward vectors, max deviation {worst:.1e}"))
}

fn completion_parity(tmp: &Path) -> Outcome {
    let runs = [
        ("branched", vec!["--mode", "branched", "--branching", "4", "--trees", "4", "--depth", "2"]),
        ("linear", vec!["--mode", "linear", "--trees", "10", "--depth", "2"]),
    ];
    let mut counts = Vec::new();
    for (name, flags) in runs {
        let dir = tmp.join(format!("parity_{name}"));
        let mut args = vec!["train", "--cases", "3", "--out", path(&dir)];
        args.extend(flags);
        scf(&args)?;
        let manifest: Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let recorded = manifest["completions_per_case"].as_u64().ok_or("manifest lacks completions_per_case")?;
        ensure!(recorded == 20, "{name} manifest records {recorded} completions per case");

        // Count the doctor nodes of forests actually sampled under that config.
        let cfg: TrainConfig = serde_json::from_value(manifest["config"].clone()).map_err(|e| e.to_string())?;
        let spec = GameSpec::default();
        let env = SimEnv::new(spec.clone(), cfg.forest.depth).map_err(|e| e.to_string())?;
        let policy = env.new_policy();
        for case in spec.generate_case_bank(5, 5).unwrap() {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let sampled = trainer::sample_forest(&policy, &case, &env, cfg.forest, &mut rng).map_err(|e| e.to_string())?;
            let n = sampled.forest.doctor_nodes().count();
            ensure!(n == 20 && sampled.decisions.len() == 20, "{name} forest has {n} doctor completions");
        }
        counts.push(format!("{name} {recorded}"));
    }
    Ok(format!("{} completions per case", counts.join(", ")))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (states, actions) = (rng.gen_range(4..=12), rng.gen_range(13..=17));
        let logits = (0..states * actions).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let params = PolicyParams::from_logits(states, actions, logits).unwrap();
        let mut cfg = TrainConfig::branched();
        cfg.clip_eps = rng.gen_range(0.1..0.3);
        cfg.kl_coef = rng.gen_range(0.0..0.5);
        let n = rng.gen_range(1..=48);
        let mut batch = Vec::new();
        while batch.len() < n {
            let state = StateId(rng.gen_range(0..states));
            let action = rng.gen_range(0..actions);
            let lp = params.logprob(state, action).unwrap();
            let logp_old = lp + rng.gen_range(-0.4..0.4);
            let ratio = (lp - logp_old).exp();
            // stay off the clip kinks, where the derivative is undefined
            if (ratio - (1.0 - cfg.clip_eps)).abs() < 1e-3 || (ratio - (1.0 + cfg.clip_eps)).abs() < 1e-3 {
                continue;
            }
            let logp_ref = lp + rng.gen_range(-0.5..0.5);
            batch.push(Sample { state, action, logp_old, logp_ref, advantage: rng.gen_range(-2.0..2.0) });
        }
        let grad = policy_gradient(&params, &batch, &cfg).map_err(|e| e.to_string())?;
        for i in 0..params.len() {
            let (mut up, mut down) = (params.clone(), params.clone());
            up.as_mut_slice()[i] += h;
            down.as_mut_slice()[i] -= h;
            let fd = (objective(&up, &batch, &cfg).unwrap() - objective(&down, &batch, &cfg).unwrap()) / (2.0 * h);
            let g = grad.values[i];
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-3));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-6, "max relative error {worst:e}");
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("100 pairs, max relative error {worst:.1e}, {secs:.2}s"))
}

/// Output of `scf compare --seeds 20`, shared by three criteria.
struct Comparison {
    report: Value,
    dir: PathBuf,
    seconds: f64,
}

fn run_compare(tmp: &Path) -> Result<Comparison, String> {
    let dir = tmp.join("compare");
    let start = Instant::now();
    scf(&["compare", "--seeds", "20", "--train-cases", "200", "--out", path(&dir)])?;
    let seconds = start.elapsed().as_secs_f64();
    let text = std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    let report = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(Comparison { report, dir, seconds })
}

fn column(report: &Value, key: &str) -> Result<Vec<f64>, String> {
    report["per_seed"]
        .as_array()
        .ok_or("report lacks per_seed")?
        .iter()
        .map(|s| s[key].as_f64().ok_or_else(|| format!("per_seed entry lacks {key}")))
        .collect()
}

fn headline_ordering(c: &Result<Comparison, String>) -> Outcome {
    let c = c.as_ref().map_err(Clone::clone)?;
    let branched = column(&c.report, "branched_percentage")?;
    let linear = column(&c.report, "linear_percentage")?;
    let base = column(&c.report, "base_percentage")?;
    ensure!(branched.len() >= 20, "only {} seeds", branched.len());
    let vs_linear = paired_t_test(&branched, &linear, 0.05).map_err(|e| e.to_string())?;
    let vs_base = paired_t_test(&branched, &base, 0.05).map_err(|e| e.to_string())?;
    let p = vs_linear.p.unwrap_or(1.0);
    let detail = format!(
        "branched {:.2}% vs linear {:.2}% (p = {p:.4}), untrained {:.2}%, {:.0}s",
        mean(&branched),
        mean(&linear),
        mean(&base),
        c.seconds
    );
    ensure!(vs_linear.mean_difference > 0.0 && p < 0.05, "{detail}");
    ensure!(vs_base.mean_difference > 0.0 && vs_base.significant, "{detail}");
    ensure!(c.seconds < 300.0, "{detail}");
    Ok(detail)
}

fn broadness(c: &Result<Comparison, String>) -> Outcome {
    let c = c.as_ref().map_err(Clone::clone)?;
    let branched = column(&c.report, "branched_broadness")?;
    let linear = column(&c.report, "linear_broadness")?;
    let t = paired_t_test(&linear, &branched, 0.05).map_err(|e| e.to_string())?;
    let p = t.p.unwrap_or(1.0);
    let detail = format!("Likert branched {:.3} vs linear {:.3} (p = {p:.4})", mean(&branched), mean(&linear));
    ensure!(t.mean_difference > 0.0 && p < 0.05, "{detail}");
    Ok(detail)
}

fn reward_curves(c: &Result<Comparison, String>) -> Outcome {
    let c = c.as_ref().map_err(Clone::clone)?;
    let seeds: Vec<u64> = c.report["per_seed"]
        .as_array()
        .ok_or("report lacks per_seed")?
        .iter()
        .map(|s| s["seed"].as_u64().ok_or("seed missing"))
        .collect::<Result<_, _>>()?;
    let mut wins = 0;
    for seed in &seeds {
        let tail = |mode: &str| -> Result<f64, String> {
            let file = c.dir.join("curves").join(format!("seed{seed}_{mode}.csv"));
            let text = std::fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let curve = parse_reward_curve(&text).map_err(|e| e.to_string())?;
            ensure!(curve.len() == 200, "{} has {} steps", file.display(), curve.len());
            tail_mean(&curve, 0.1).ok_or_else(|| format!("{} is empty", file.display()))
        };
        if tail("branched")? > tail("linear")? {
            wins += 1;
        }
    }
    let rate = wins as f64 / seeds.len() as f64;
    let detail = format!("branched tail higher in {wins}/{} seeds ({:.0}%)", seeds.len(), 100.0 * rate);
    ensure!(rate >= 0.75, "{detail}");
    Ok(detail)
}

/// Two-sided t tail by Simpson integration of cos^(ν−1) θ, the t density
/// after substituting x = √ν·tan θ.
fn integrated_p(t: f64, df: f64) -> f64 {
    let f = |x: f64| x.cos().powf(df - 1.0);
    let simpson = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
        (f(a) + inner + f(b)) * h / 3.0
    };
    simpson((t.abs() / df.sqrt()).atan(), FRAC_PI_2) / simpson(0.0, FRAC_PI_2)
}

fn evalkit_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vocab = ["what", "is", "the", "duration", "of", "your", "Pain", "do", "you"];
    for trial in 0..100 {
        let corpus: Vec<String> = (0..rng.gen_range(1..=10))
            .map(|_| {
                (0..rng.gen_range(0..=60))
                    .map(|_| {
                        let w = vocab[rng.gen_range(0..vocab.len())];
                        if rng.gen_bool(0.2) { format!("{w}?") } else { w.to_string() }
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let n = rng.gen_range(1..=6);
        let mut brute: BTreeMap<String, usize> = BTreeMap::new();
        for text in &corpus {
            let words: Vec<String> =
                text.split_whitespace().map(|w| w.trim_end_matches('?').to_lowercase()).collect();
            for start in 0..words.len().saturating_sub(n - 1) {
                *brute.entry(words[start..start + n].join(" ")).or_default() += 1;
            }
        }
        let got: BTreeMap<String, usize> =
            top_ngrams(&corpus, n, usize::MAX).into_iter().map(|r| (r.ngram, r.count)).collect();
        ensure!(got == brute, "n-gram corpus {trial} disagrees with recount");
    }
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(2..=30);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let shift = rng.gen_range(-1.0..1.0);
        let b: Vec<f64> = a.iter().map(|x| x + shift + rng.gen_range(-2.0..2.0)).collect();
        let r = paired_t_test(&a, &b, 0.05).map_err(|e| e.to_string())?;
        worst = worst.max((r.p.ok_or("degenerate sample")? - integrated_p(r.t, r.df)).abs());
    }
    ensure!(worst < 1e-6, "t-test p off the integrated reference by {worst:e}");
    let score = score_test_set(&[1.0, 0.5, 0.0]).map_err(|e| e.to_string())?;
    ensure!(score == 50.0, "score_test_set([1.0, 0.5, 0.0]) = {score}");
    let spec = GameSpec::default();
    let scale: Vec<f64> = ["dx00", "dx01", "dx02"].iter().map(|p| spec.grade_diagnosis(p, "dx00").unwrap()).collect();
    ensure!(scale == [1.0, 0.5, 0.0], "grade scale {scale:?}");
    Ok(format!("100 n-gram corpora, t-test max |Δp| {worst:.1e}, score 50.0, grades {scale:?}"))
}

/// Trains step by step and checks every skipped step left the policy and
/// optimizer untouched.
fn skip_rule() -> Outcome {
    let spec = GameSpec::default();
    let env = SimEnv::new(spec.clone(), 2).unwrap();
    let bank = spec.generate_case_bank(99, 200).unwrap();
    let cfg = TrainConfig::branched();
    let mut ck = Checkpoint::fresh(&env, &cfg);
    let (mut skipped, mut trained) = (0, 0);
    for _ in 0..bank.len() {
        let before = ck.clone();
        let run = train_on_bank(&env, &bank, &cfg, ck, Some(1)).map_err(|e| e.to_string())?;
        let stats = &run.stats[0];
        if stats.skipped {
            skipped += 1;
            let same_bits = before.params.as_slice().iter().zip(run.checkpoint.params.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same_bits && before.opt == run.checkpoint.opt, "step {} skipped but changed state", run.checkpoint.steps_completed);
            ensure!(stats.loss.is_none(), "skipped step reports a loss");
        } else {
            trained += 1;
            ensure!(before.params != run.checkpoint.params, "trained step left parameters unchanged");
        }
        ck = run.checkpoint;
    }
    ensure!(skipped > 0 && trained > 0, "{skipped} skipped, {trained} trained: both kinds needed");
    let whole = train_on_bank(&env, &bank, &cfg, Checkpoint::fresh(&env, &cfg), None).map_err(|e| e.to_string())?;
    ensure!(whole.skipped() == skipped, "whole run counts {} skipped, stepwise {skipped}", whole.skipped());
    ensure!(whole.checkpoint == ck, "stepwise and whole runs diverged");
    Ok(format!("{skipped} of 200 cases skipped with bit-identical state"))
}

/// Chat-completions stub speaking plain HTTP. Doctor questions rotate
/// through a fixed list, so sibling branches differ the way sampled
/// completions would.
struct Stub {
    url: String,
    /// (model, concatenated message contents) per request.
    log: Arc<Mutex<Vec<(String, String)>>>,
}

const QUESTIONS: [&str; 4] = [
    "Can you describe your symptoms?",
    "Have you travelled recently?",
    "Do you have a cough?",
    "Any chills at night?",
];

fn stub_reply(model: &str, messages: &[Value], counter: &AtomicUsize) -> String {
    let text = |m: &Value| m["content"].as_str().unwrap_or_default().to_string();
    let last = messages.last().map(text).unwrap_or_default();
    match model {
        "doctor-m" => QUESTIONS[counter.fetch_add(1, Ordering::SeqCst) % QUESTIONS.len()].into(),
        "patient-m" if last.contains("travelled") => "Yes, I travelled abroad last month.".into(),
        "patient-m" if last.contains("chills") => "Yes, every other evening.".into(),
        "patient-m" => "Not that I noticed.".into(),
        "dx-m" if last.contains("travelled abroad") => "Malaria".into(),
        "dx-m" => "Influenza".into(),
        "grader-m" => {
            let field = |name: &str| {
                last.lines()
                    .find_map(|l| l.strip_prefix(name))
                    .map(|s| s.trim().to_lowercase())
                    .unwrap_or_default()
            };
            let (predicted, gold) = (field("Predicted diagnosis:"), field("Correct diagnosis:"));
            if predicted == gold {
                "1.0".into()
            } else if gold.contains(&predicted) {
                "Score: 0.5".into()
            } else {
                "0.0".into()
            }
        }
        other => format!("unknown model {other}"),
    }
}

fn serve(mut stream: TcpStream, log: &Mutex<Vec<(String, String)>>, counter: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    let (mut length, mut authorized) = (0, false);
    reader.read_line(&mut line).unwrap();
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        let (name, value) = header.split_once(':').unwrap_or((header, ""));
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "authorization" => authorized = value.trim() == "Bearer stub-key",
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let request: Value = serde_json::from_slice(&body).unwrap();
    let model = request["model"].as_str().unwrap_or_default().to_string();
    let messages = request["messages"].as_array().cloned().unwrap_or_default();
    let joined = messages.iter().filter_map(|m| m["content"].as_str()).collect::<Vec<_>>().join("\n");
    log.lock().unwrap().push((model.clone(), joined));
    let (status, payload) = if authorized {
        let content = stub_reply(&model, &messages, counter);
        ("200 OK", serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}))
    } else {
        ("401 Unauthorized", serde_json::json!({"error": "bad key"}))
    };
    let payload = payload.to_string();
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

fn spawn_stub() -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let log = Arc::new(Mutex::new(Vec::new()));
    let counter = Arc::new(AtomicUsize::new(0));
    let shared = log.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let (log, counter) = (shared.clone(), counter.clone());
            std::thread::spawn(move || serve(stream, &log, &counter));
        }
    });
    Stub { url, log }
}

fn stub_bank() -> Vec<CaseRecord> {
    let case = |id: &str, intro: &str, facts: [&str; 2], dx: &str| CaseRecord {
        case_id: id.into(),
        intro: intro.into(),
        clinical_facts: facts.iter().map(|f| f.to_string()).collect(),
        diagnosis: dx.into(),
        family: None,
    };
    vec![
        case(
            "case-malaria",
            "34-year-old woman with two days of fever",
            ["travelled to Ghana last month", "cyclic chills every 48 hours"],
            "Plasmodium falciparum malaria",
        ),
        case(
            "case-flu",
            "61-year-old man with fever and aching muscles",
            ["myalgia since Tuesday", "sick contacts at work"],
            "influenza A",
        ),
    ]
}

fn gateway_replay(tmp: &Path) -> Outcome {
    let stub = spawn_stub();
    let bank = stub_bank();
    let bank_path = tmp.join("stub_bank.jsonl");
    let mut buf = Vec::new();
    write_bank(&mut buf, &bank).map_err(|e| e.to_string())?;
    std::fs::write(&bank_path, buf).map_err(|e| e.to_string())?;
    let config_path = tmp.join("gateway.toml");
    let config = format!(
        "endpoint = \"{}\"\napi_key_env = \"SCF_STUB_KEY\"\nparallelism = 4\n\n\
         [doctor]\nmodel = \"doctor-m\"\n[patient]\nmodel = \"patient-m\"\n\
         [diagnostician]\nmodel = \"dx-m\"\n[grader]\nmodel = \"grader-m\"\n",
        stub.url
    );
    std::fs::write(&config_path, config).map_err(|e| e.to_string())?;

    let (export, store, replayed) = (tmp.join("export.jsonl"), tmp.join("store.jsonl"), tmp.join("replayed.jsonl"));
    let forest = ["--mode", "branched", "--branching", "4", "--trees", "4", "--depth", "2"];
    let common = ["export-training", "--backend", "gateway", "--bank", path(&bank_path), "--config", path(&config_path)];
    let mut live: Vec<&str> = common.to_vec();
    live.extend(["--out", path(&export), "--record", path(&store)]);
    live.extend(forest);
    scf(&live)?;
    let live_requests = stub.log.lock().unwrap().len();

    // Replay answers from the store alone and must reproduce the export.
    let mut again: Vec<&str> = common.to_vec();
    again.extend(["--out", path(&replayed), "--replay", path(&store)]);
    again.extend(forest);
    scf(&again)?;
    ensure!(stub.log.lock().unwrap().len() == live_requests, "replay reached the network");
    let bytes = std::fs::read(&export).map_err(|e| e.to_string())?;
    ensure!(std::fs::read(&replayed).map_err(|e| e.to_string())? == bytes, "replayed export differs");

    // Every case yields a full graded forest of 20 doctor completions.
    let records = read_export(bytes.as_slice()).map_err(|e| e.to_string())?;
    for case in &bank {
        let mine: Vec<_> = records.iter().filter(|r| r.case_id == case.case_id).collect();
        ensure!(mine.len() == 20, "{} exported {} completions", case.case_id, mine.len());
        ensure!(mine.iter().filter(|r| r.depth == 2).all(|r| [0.0, 0.5, 1.0].contains(&r.reward_raw)), "leaf rewards off scale");
        ensure!(mine.iter().any(|r| r.advantage != 0.0), "{} has no learning signal", case.case_id);
    }
    let mut rewritten = Vec::new();
    write_export(&mut rewritten, &records).map_err(|e| e.to_string())?;
    ensure!(rewritten == bytes, "export does not re-serialize byte for byte");
    ensure!(read_export(rewritten.as_slice()).map_err(|e| e.to_string())? == records, "export round trip lost data");

    // Role isolation over every request the doctor role made.
    let log = stub.log.lock().unwrap();
    let doctor: Vec<&String> = log.iter().filter(|(m, _)| m == "doctor-m").map(|(_, t)| t).collect();
    ensure!(doctor.len() == 20 * bank.len(), "{} doctor requests", doctor.len());
    for prompt in &doctor {
        for case in &bank {
            ensure!(!prompt.contains(&case.diagnosis), "doctor prompt leaks {}", case.diagnosis);
            for fact in &case.clinical_facts {
                ensure!(!prompt.contains(fact.as_str()), "doctor prompt leaks `{fact}`");
            }
        }
    }
    let patient_sees_answer =
        log.iter().filter(|(m, _)| m == "patient-m").all(|(_, t)| bank.iter().any(|c| t.contains(&c.diagnosis)));
    ensure!(patient_sees_answer, "patient prompts lack the diagnosis");
    Ok(format!(
        "{} records over {} live requests, replay identical, {} doctor prompts isolated",
        records.len(),
        live_requests,
        doctor.len()
    ))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let tmp = tmp.path();
    // The comparison is the slow part; start it first.
    let compare = {
        let dir = tmp.to_path_buf();
        std::thread::spawn(move || run_compare(&dir))
    };
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut check = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        results.push((n, name, outcome));
    };
    check(1, "forest invariants", &forest_invariants);
    check(2, "branching 1 reduces to group-relative advantages", &grpo_reduction);
    check(3, "completion parity", &|| completion_parity(tmp));
    check(4, "gradient correctness", &gradient_check);
    check(8, "evaluation kit oracles", &evalkit_oracles);
    check(9, "skip rule", &skip_rule);
    check(10, "gateway replay and role isolation", &|| gateway_replay(tmp));
    let compare = compare.join().unwrap_or_else(|_| Err("compare thread panicked".into()));
    check(5, "branched beats linear and untrained", &|| headline_ordering(&compare));
    check(6, "branched asks broader questions", &|| broadness(&compare));
    check(7, "branched reward curve tail", &|| reward_curves(&compare));

    results.sort_by_key(|(n, _, _)| *n);
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {n:>2} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
