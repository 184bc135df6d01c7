//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the console.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use funcda_core::annotate::{distribution_report, AnnotationResult, UnlabeledPart};
use funcda_core::backend::features::{FeatureVector, FeaturizerConfig};
use funcda_core::backend::mock::{MockConfig, MockServer};
use funcda_core::backend::remote::{JobState, RemoteJobSpec, RetryPolicy};
use funcda_core::backend::softmax::{example_loss, loss_gradient, train_features, SoftmaxModel, NUM_CLASSES};
use funcda_core::backend::{
    BackendError, Classifier, ClassifierFactory, Hyperparameters, PredictionResult, RemoteClient, RemoteConfig,
};
use funcda_core::corpus::{render_prompt, split_indices, to_chat_example, to_jsonl_bytes, LabeledExample, SplitSpec};
use funcda_core::eval::{evaluate, EvaluationReport, Metric};
use funcda_core::search::{run_search, select_best, SearchOptions, SearchSpace, SearchTrial};
use funcda_core::taxonomy::{builtin_taxonomy, FunctionLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROMPT_GOLDEN: &str = include_str!("../../core/tests/golden/prompt_washer_tablet_stand.txt");
const UPLOAD_GOLDEN: &[u8] = include_bytes!("../../core/tests/golden/upload_pedal_fin.jsonl");

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 10] = [
        ("metric oracle equivalence", metric_oracle),
        ("micro identity", micro_identity),
        ("gradient correctness", gradient_check),
        ("training sanity", training_sanity),
        ("search correctness", search_selection),
        ("pipeline determinism", pipeline_determinism),
        ("split arithmetic", split_arithmetic),
        ("wire-contract fidelity", wire_contract),
        ("prompt golden", prompt_golden),
        ("annotation report", annotation_report),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.2}s): {why}", i + 1)
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:?}, limit {limit:?}"))
}

fn label(i: usize) -> FunctionLabel {
    FunctionLabel::ALL[i].clone()
}

fn random_pairs(rng: &mut ChaCha8Rng, oov: bool) -> Vec<(FunctionLabel, FunctionLabel)> {
    let n = rng.gen_range(1..=50);
    // draw from a random subset of classes so absent classes occur often
    let k = rng.gen_range(1..=NUM_CLASSES);
    (0..n)
        .map(|_| {
            let y = label(rng.gen_range(0..k));
            let p = if oov && rng.gen_bool(0.15) {
                FunctionLabel::OutOfVocabulary("gizmo".into())
            } else {
                label(rng.gen_range(0..NUM_CLASSES))
            };
            (y, p)
        })
        .collect()
}

struct Oracle {
    accuracy: f64,
    weighted: [f64; 3],
    macro_: [f64; 3],
    micro: [f64; 3],
    per_class: Vec<[f64; 3]>,
}

fn div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Counts straight from the pair list, no confusion matrix.
fn brute_force(pairs: &[(FunctionLabel, FunctionLabel)]) -> Oracle {
    let s = pairs.len() as f64;
    let mut per_class = Vec::new();
    let (mut w, mut m) = ([0.0; 3], [0.0; 3]);
    let (mut present, mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..NUM_CLASSES {
        let lc = label(c);
        let tp = pairs.iter().filter(|(y, p)| *y == lc && *p == lc).count() as f64;
        let fp = pairs.iter().filter(|(y, p)| *y != lc && *p == lc).count() as f64;
        let fn_ = pairs.iter().filter(|(y, p)| *y == lc && *p != lc).count() as f64;
        let support = tp + fn_;
        let prec = div(tp, tp + fp);
        let rec = div(tp, tp + fn_);
        let f1 = div(2.0 * prec * rec, prec + rec);
        per_class.push([f1, prec, rec]);
        for (acc, v) in w.iter_mut().zip([f1, prec, rec]) {
            *acc += support * v / s;
        }
        if support > 0.0 {
            present += 1.0;
            for (acc, v) in m.iter_mut().zip([f1, prec, rec]) {
                *acc += v;
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let correct = pairs.iter().filter(|(y, p)| y == p).count() as f64;
    Oracle {
        accuracy: correct / s,
        weighted: w,
        macro_: m.map(|v| v / present),
        micro: [
            div(2.0 * tp_all, 2.0 * tp_all + fp_all + fn_all),
            div(tp_all, tp_all + fp_all),
            div(tp_all, tp_all + fn_all),
        ],
        per_class,
    }
}

fn triple(a: funcda_core::eval::Averaged) -> [f64; 3] {
    [a.f1, a.precision, a.recall]
}

fn metric_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 1000;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let pairs = random_pairs(&mut rng, case % 2 == 0);
        let r = evaluate(&pairs).map_err(|e| e.to_string())?;
        let o = brute_force(&pairs);
        let mut got = vec![r.accuracy];
        let mut want = vec![o.accuracy];
        got.extend(triple(r.weighted).into_iter().chain(triple(r.macro_avg)).chain(triple(r.micro)));
        want.extend(o.weighted.into_iter().chain(o.macro_).chain(o.micro));
        for (m, oc) in r.per_class.iter().zip(&o.per_class) {
            got.extend([m.f1, m.precision, m.recall]);
            want.extend(oc);
        }
        for (g, w) in got.iter().zip(&want) {
            let d = (g - w).abs();
            worst = worst.max(d);
            ensure(d <= 1e-12, || format!("case {case}: {g} vs {w}"))?;
        }
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("{cases} instances, max deviation {worst:.1e}"))
}

fn micro_identity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 500;
    for case in 0..cases {
        let pairs = random_pairs(&mut rng, false);
        let r: EvaluationReport = evaluate(&pairs).map_err(|e| e.to_string())?;
        ensure(
            r.micro.precision == r.accuracy && r.micro.recall == r.accuracy && r.micro.f1 == r.accuracy,
            || format!("case {case}: micro {:?} vs accuracy {}", r.micro, r.accuracy),
        )?;
    }
    Ok(format!("{cases} instances, exact equality"))
}

fn gradient_check() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-4;
    let instances = 100;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dim = rng.gen_range(2..=20);
        let cfg = FeaturizerConfig {
            dim,
            ngram_min: 1,
            ngram_max: 1,
            hash_seed: 0,
        };
        let weights: Vec<f64> = (0..dim * NUM_CLASSES).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = SoftmaxModel::from_weights(cfg, weights).map_err(|e| e.to_string())?;
        let mut dense: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        dense[dim - 1] = 1.0;
        let x = FeatureVector::from_dense(&dense);
        let y = label(rng.gen_range(0..NUM_CLASSES));
        let (_, grad) = loss_gradient(&model, &x, &y).map_err(|e| e.to_string())?;
        let mut numeric = vec![0.0; grad.len()];
        for f in 0..dim {
            for c in 0..NUM_CLASSES {
                let mut plus = model.clone();
                plus.set_weight(f, c, model.weight(f, c) + h);
                let mut minus = model.clone();
                minus.set_weight(f, c, model.weight(f, c) - h);
                numeric[f * NUM_CLASSES + c] =
                    (example_loss(&plus, &x, &y).unwrap() - example_loss(&minus, &x, &y).unwrap()) / (2.0 * h);
            }
        }
        // relative error of the whole gradient, ‖a − n‖ / max(‖a‖, ‖n‖)
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let err = norm(&diff) / norm(&grad).max(norm(&numeric)).max(1e-300);
        worst = worst.max(err);
        ensure(err <= 1e-5, || format!("dim {dim}: relative error {err:e}"))?;
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!("{instances} instances, max relative error {worst:.1e}"))
}

fn training_sanity() -> Result<String, String> {
    let start = Instant::now();
    let tax = builtin_taxonomy();
    let mut examples = Vec::new();
    for c in 0..NUM_CLASSES {
        for i in 0..100 {
            examples.push(LabeledExample {
                part_name: format!("sig{c}token part{}", i % 10),
                system_name: format!("assembly {}", (i * 7) % 5),
                label: label(c),
            });
        }
    }
    let featurizer = FeaturizerConfig::default();
    let data = funcda_core::backend::softmax::prepare_features(&examples, &tax, &featurizer).map_err(|e| e.to_string())?;
    let hp = Hyperparameters::new(20, 8, 0.1);
    let (_, trace) = train_features(&data, featurizer, &hp, 0.1, 0).map_err(|e| e.to_string())?;
    ensure(trace.epoch_losses.len() == 20, || "trace length".into())?;
    ensure(trace.train_accuracy == 1.0, || format!("train accuracy {}", trace.train_accuracy))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!(
        "800 examples, {hp}, train accuracy {}, final loss {:.4}",
        trace.train_accuracy,
        trace.epoch_losses.last().unwrap()
    ))
}

struct Rigged {
    accuracy: f64,
}

impl Classifier for Rigged {
    fn id(&self) -> &str {
        "rigged"
    }

    fn predict(&self, part: &str, _assembly: &str) -> Result<PredictionResult, BackendError> {
        // parts are "p0".."p99"; the first accuracy·100 are answered correctly
        let i: usize = part[1..].parse().unwrap();
        let correct = (i as f64) < (self.accuracy * 100.0).round();
        Ok(PredictionResult {
            raw_text: if correct { "Support" } else { "Branch" }.into(),
            probabilities: None,
            cached: false,
        })
    }
}

struct RiggedFactory {
    presets: BTreeMap<u32, f64>,
}

impl ClassifierFactory for RiggedFactory {
    fn build(&self, hp: &Hyperparameters, _: &[LabeledExample], _: usize) -> Result<Box<dyn Classifier>, BackendError> {
        Ok(Box::new(Rigged {
            accuracy: self.presets[&hp.epochs],
        }))
    }
}

fn permutations(items: &[f64]) -> Vec<Vec<f64>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn search_selection() -> Result<String, String> {
    let data: Vec<LabeledExample> = (0..100)
        .map(|i| LabeledExample {
            part_name: format!("p{i}"),
            system_name: "rig".into(),
            label: FunctionLabel::Support,
        })
        .collect();
    let mut checked = 0;
    // distinct values, then a tie between the two best
    for presets in [[0.2, 0.5, 0.7, 0.4], [0.3, 0.6, 0.6, 0.1]] {
        for perm in permutations(&presets) {
            let space = SearchSpace {
                epoch_choices: vec![1, 2, 3, 4],
                batch_choices: vec![1],
                lr_choices: vec![1.0],
                trials: 4,
                seed: 5,
            };
            let factory = RiggedFactory {
                presets: (1..=4).zip(perm.iter().cloned()).collect(),
            };
            let report = run_search(&space, &data, &data, &factory, &SearchOptions::default()).map_err(|e| e.to_string())?;
            let accs: Vec<f64> = report.trials.iter().map(|t| factory.presets[&t.hp.epochs]).collect();
            let max = accs.iter().cloned().fold(f64::MIN, f64::max);
            let expected = accs.iter().position(|&a| a == max).unwrap();
            ensure(report.best_index == expected && report.best == report.trials[expected].hp, || {
                format!("presets {perm:?}: picked {} expected {expected}", report.best_index)
            })?;
            let trials: Vec<SearchTrial> = report.trials.clone();
            ensure(select_best(&trials, Metric::Accuracy).unwrap() == report.trials[expected].hp, || {
                "select_best disagrees".into()
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} permutations (24 distinct, 24 with a tie)"))
}

fn funcda_bin() -> &'static str {
    env!("CARGO_BIN_EXE_funcda")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run_pipeline(workdir: &Path) -> Result<(), String> {
    let out = Command::new(funcda_bin())
        .arg("run")
        .arg("--config")
        .arg(fixture("config.json"))
        .arg("--osdr")
        .arg(fixture("osdr_sample.csv"))
        .arg("--abc")
        .arg(fixture("abc_sample.csv"))
        .arg("--workdir")
        .arg(workdir)
        .env_remove("FUNC_DA_BASE_URL")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn pipeline_determinism() -> Result<String, String> {
    let start = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    ensure(sa.contains_key("09_report.md"), || "no report written".into())?;
    ensure(sa.keys().eq(sb.keys()), || format!("file sets differ: {:?} vs {:?}", sa.keys(), sb.keys()))?;
    for (name, bytes) in &sa {
        ensure(&sb[name] == bytes, || format!("{name} differs"))?;
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("{} artifacts byte-identical", sa.len()))
}

fn split_arithmetic() -> Result<String, String> {
    let labels: Vec<FunctionLabel> = (0..7568).map(|i| label((i * 5 + i / 3) % NUM_CLASSES)).collect();
    let mut sizes = Vec::new();
    for stratified in [true, false] {
        let spec = SplitSpec {
            test_fraction: 0.10,
            train_subsample_fraction: 0.10,
            seed: 0,
            stratified,
        };
        let idx = split_indices(&labels, &spec).map_err(|e| e.to_string())?;
        ensure(idx.train.len().abs_diff(681) <= 1, || {
            format!("stratified={stratified}: {} training examples", idx.train.len())
        })?;
        sizes.push(idx.train.len());
    }
    Ok(format!("7568 records -> training sizes {sizes:?} (stratified, uniform)"))
}

fn wire_contract() -> Result<String, String> {
    let start = Instant::now();
    let server = MockServer::start(MockConfig {
        rate_limit_first: 1,
        retry_after_secs: 0,
        ..MockConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let client = Arc::new(
        RemoteClient::new(RemoteConfig {
            base_url: server.base_url(),
            api_key: Some("k".into()),
            retry: RetryPolicy {
                max_attempts: 5,
                base_delay: Duration::from_millis(10),
                max_delay: Duration::from_millis(50),
            },
            min_request_interval: Duration::ZERO,
            poll_interval: Duration::from_millis(5),
            poll_timeout: Duration::from_secs(5),
            request_timeout: Duration::from_secs(5),
            ..RemoteConfig::default()
        })
        .map_err(|e| e.to_string())?,
    );
    let tax = builtin_taxonomy();
    let examples = [
        LabeledExample {
            part_name: "pedal".into(),
            system_name: "brake system".into(),
            label: FunctionLabel::Channel,
        },
        LabeledExample {
            part_name: "fin".into(),
            system_name: "brake system".into(),
            label: FunctionLabel::Branch,
        },
    ];
    let chats: Vec<_> = examples.iter().map(|e| to_chat_example(e, &tax, None).unwrap()).collect();
    let bytes = to_jsonl_bytes(&chats);
    ensure(bytes == UPLOAD_GOLDEN, || "rendered JSONL differs from golden".into())?;
    let file = client.upload_file("train.jsonl", &bytes).map_err(|e| e.to_string())?;
    ensure(server.uploads()[0].bytes == UPLOAD_GOLDEN, || "uploaded bytes differ from golden".into())?;

    let job = client
        .create_finetune_job(&RemoteJobSpec {
            training_file: file,
            model: "gpt-3.5-turbo".into(),
            hyperparameters: Hyperparameters::new(12, 20, 20.0),
        })
        .map_err(|e| e.to_string())?;
    let (states, _) = client.wait_for_job(&job).map_err(|e| e.to_string())?;
    ensure(states == [JobState::Queued, JobState::Running, JobState::Succeeded], || {
        format!("observed {states:?}")
    })?;

    let before = client.wire_calls();
    let first = client.remote_predict("ft:mock-model:0001", "washer").map_err(|e| e.to_string())?;
    ensure(client.wire_calls() - before == 2 && server.chat_requests() == 2, || {
        format!("429 then 200 took {} wire calls", client.wire_calls() - before)
    })?;
    let calls = client.wire_calls();
    let again = client.remote_predict("ft:mock-model:0001", "washer").map_err(|e| e.to_string())?;
    ensure(again.cached && again.raw_text == first.raw_text && client.wire_calls() == calls, || {
        "repeated prompt made a wire call".into()
    })?;
    within(Duration::from_secs(10), start)?;
    Ok("golden upload, queued->running->succeeded, 1 retry after 429, cache hit".into())
}

fn prompt_golden() -> Result<String, String> {
    let tax = builtin_taxonomy();
    let prompt = render_prompt("Washer", "Tablet Stand", &tax).map_err(|e| e.to_string())?;
    ensure(prompt == PROMPT_GOLDEN, || "prompt differs from golden file".into())?;
    ensure(
        PROMPT_GOLDEN.contains("what is the function of a part Washer in the system Tablet Stand?"),
        || "interrogative clause missing".into(),
    )?;
    for d in tax.definitions() {
        ensure(PROMPT_GOLDEN.matches(d.definition.as_str()).count() == 1, || {
            format!("definition of {} not present exactly once", d.label)
        })?;
    }
    Ok(format!("{} bytes, 8 definitions", prompt.len()))
}

fn annotation_report() -> Result<String, String> {
    let names = ["Branch", "Channel", "Connect", "Control Magnitude", "Convert", "Provision", "Signal", "Support"];
    let mut results: Vec<AnnotationResult> = (0..99)
        .map(|i| {
            AnnotationResult::from_raw(UnlabeledPart::new(format!("part {i}"), "rig"), names[i % 8].into(), "fixture", false)
        })
        .collect();
    results.push(AnnotationResult::from_raw(UnlabeledPart::new("odd", "rig"), "Levitate".into(), "fixture", false));
    let report = distribution_report(&results).map_err(|e| e.to_string())?;
    ensure(report.in_vocabulary_fraction == 0.99, || {
        format!("in-vocabulary fraction {}", report.in_vocabulary_fraction)
    })?;
    ensure(report.out_of_vocabulary == 1 && report.total == 100, || "bad totals".into())?;
    Ok("99 of 100 in vocabulary -> 0.99".into())
}
