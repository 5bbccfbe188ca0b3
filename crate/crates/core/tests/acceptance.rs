//! Acceptance suite: nine end-to-end guarantees, one test each.
//!
//! Every test prints one `ACCEPTANCE Cn PASS` line on success (visible with
//! `--nocapture`); a failure panics with the measured values. Checks compare
//! the library against independent oracles written here: interval-scanning
//! calibration binning, O(n^2) rank pair counting, and quadratic
//! ranked-precision sums, none of which share code with the library.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptshift::backend::{
    build_backend, BackendConfig, BackendKind, GenParams, MockProfile, TextBackend,
};
use promptshift::dataset::{Dataset, Domain, Role, TaskItem, TaskSet};
use promptshift::evaluator::{evaluate_prompt, ConfidenceMode, ItemRecord};
use promptshift::exec::Runner;
use promptshift::metaprompt::{
    dedupe, parse_history_pairs, render_history, score_percent, PromptRecord,
};
use promptshift::metrics::{
    compute_metrics, expected_calibration_error, normalize_and_compose, MetricVector,
};
use promptshift::optimizer::{
    run_stage, OptimizerConfig, StageOutcome, Termination, DEFAULT_ORIGIN_PROMPT,
};
use promptshift::store::{CurveFormat, RunStore, StepEntry};

// ===========================================================================
// shared helpers
// ===========================================================================

fn answered(id: &str, confidence: f64, correct: bool) -> ItemRecord {
    ItemRecord::answered(id, 'A', confidence, correct).expect("valid record")
}

/// Metric vector whose uniform-weight composite equals `v`, for fabricating
/// consistent prompt records.
fn vector_for(v: f64) -> MetricVector {
    MetricVector {
        acc: v,
        ece: 1.0 - v,
        auroc: v,
        pr_p: v,
        pr_n: 1.0 - v,
        ifr: 1.0,
        n_scored: 10,
        n_total: 10,
        degenerate: Vec::new(),
    }
}

fn record(text: &str, composite: f64) -> PromptRecord {
    PromptRecord::new(text, composite, vector_for(composite), Role::Source, 0, vec![])
        .expect("valid prompt record")
}

// ===========================================================================
// C1 + C2: metric oracles
// ===========================================================================

/// Interval-scanning ECE oracle: assign each scored record to the bin whose
/// half-open interval literally contains its confidence, then average gaps.
fn oracle_ece(records: &[ItemRecord], n_bins: usize) -> f64 {
    let mut ids: Vec<&ItemRecord> = records.iter().filter(|r| r.followed).collect();
    ids.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    if ids.is_empty() {
        return 1.0;
    }
    let mut bins: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n_bins];
    for r in &ids {
        let c = r.confidence.expect("followed record has confidence");
        for i in 1..=n_bins {
            let lo = (i - 1) as f64 / n_bins as f64;
            let hi = i as f64 / n_bins as f64;
            if (c == 0.0 && i == 1) || (c > lo && c <= hi) {
                bins[i - 1].push((c, r.correct));
                break;
            }
        }
    }
    let n = ids.len() as f64;
    let mut total = 0.0;
    for members in &bins {
        if members.is_empty() {
            continue;
        }
        let count = members.len() as f64;
        let conf = members.iter().map(|(c, _)| *c).sum::<f64>() / count;
        let acc = members.iter().filter(|(_, ok)| *ok).count() as f64 / count;
        total += (count / n) * (acc - conf).abs();
    }
    total
}

/// O(n^2) pair-counting AUROC oracle: wins plus half-ties over all
/// (correct, incorrect) pairs.
fn oracle_auroc(records: &[ItemRecord]) -> f64 {
    let pos: Vec<f64> = records
        .iter()
        .filter(|r| r.followed && r.correct)
        .map(|r| r.confidence.unwrap())
        .collect();
    let neg: Vec<f64> = records
        .iter()
        .filter(|r| r.followed && !r.correct)
        .map(|r| r.confidence.unwrap())
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut score = 0.0f64;
    for p in &pos {
        for q in &neg {
            if p > q {
                score += 1.0;
            } else if p == q {
                score += 0.5;
            }
        }
    }
    score / (pos.len() * neg.len()) as f64
}

/// Quadratic ranked-precision oracle for average precision: precision at
/// each target rank is recounted from scratch over the prefix.
fn oracle_ap(records: &[ItemRecord], positive_is_correct: bool) -> f64 {
    let mut s: Vec<(String, f64, bool)> = records
        .iter()
        .filter(|r| r.followed)
        .map(|r| (r.item_id.clone(), r.confidence.unwrap(), r.correct))
        .collect();
    if s.is_empty() {
        return if positive_is_correct { 0.0 } else { 1.0 };
    }
    let is_target = |c: bool| if positive_is_correct { c } else { !c };
    let n_target = s.iter().filter(|(_, _, c)| is_target(*c)).count();
    if n_target == 0 {
        return 0.0;
    }
    if positive_is_correct {
        s.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    } else {
        s.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    }
    let mut sum = 0.0f64;
    for rank in 1..=s.len() {
        if is_target(s[rank - 1].2) {
            let hits = s[..rank].iter().filter(|(_, _, c)| is_target(*c)).count();
            sum += hits as f64 / rank as f64;
        }
    }
    sum / n_target as f64
}

fn random_record_set(rng: &mut ChaCha8Rng) -> Vec<ItemRecord> {
    let n = rng.gen_range(2..=200);
    (0..n)
        .map(|i| {
            let id = format!("r{i:04}");
            if rng.gen_bool(0.15) {
                ItemRecord::unanswered(&id)
            } else {
                // Mix exact bin edges (including 0 and 1) with uniform draws
                // so boundary handling and ties are exercised.
                let c = if rng.gen_bool(0.25) {
                    rng.gen_range(0..=10) as f64 / 10.0
                } else {
                    rng.gen::<f64>()
                };
                answered(&id, c, rng.gen_bool(0.5))
            }
        })
        .collect()
}

#[test]
fn c1_metrics_match_independent_oracles_on_random_sets() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    for trial in 0..500 {
        let records = random_record_set(&mut rng);
        let got = compute_metrics(&records, 10).expect("metrics computable");

        let want_ece = oracle_ece(&records, 10);
        assert!(
            (got.ece - want_ece).abs() <= 1e-12,
            "trial {trial}: ece {} vs oracle {want_ece}",
            got.ece
        );
        assert_eq!(
            got.auroc,
            oracle_auroc(&records),
            "trial {trial}: auroc mismatch"
        );
        assert_eq!(
            got.pr_p,
            oracle_ap(&records, true),
            "trial {trial}: pr_p mismatch"
        );
        assert_eq!(
            got.pr_n,
            oracle_ap(&records, false),
            "trial {trial}: pr_n mismatch"
        );

        let correct = records.iter().filter(|r| r.correct).count();
        let followed = records.iter().filter(|r| r.followed).count();
        assert_eq!(got.acc, correct as f64 / records.len() as f64);
        assert_eq!(got.ifr, followed as f64 / records.len() as f64);
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "500 oracle comparisons took {elapsed:?}"
    );
    println!(
        "ACCEPTANCE C1 PASS - 500 random record sets match the brute-force \
         oracles (AUROC/PR bitwise, ECE within 1e-12) in {elapsed:?}"
    );
}

#[test]
fn c2_worked_calibration_example() {
    let records = vec![
        answered("a", 0.9, true),
        answered("b", 0.8, false),
        answered("c", 0.3, false),
    ];
    let ece = expected_calibration_error(&records, 10).unwrap();
    assert!(
        (ece - 0.4).abs() <= 1e-12,
        "worked example: ece {ece} differs from 0.4"
    );
    assert!((oracle_ece(&records, 10) - 0.4).abs() <= 1e-12);
    println!("ACCEPTANCE C2 PASS - ECE of the worked three-record example is 0.4 (got {ece})");
}

// ===========================================================================
// C3: composite correctness and monotonicity
// ===========================================================================

#[test]
fn c3_composite_worked_example_and_monotonicity() {
    let mv = MetricVector {
        acc: 0.5,
        ece: 0.2,
        auroc: 0.7,
        pr_p: 0.6,
        pr_n: 0.4,
        ifr: 1.0,
        n_scored: 10,
        n_total: 10,
        degenerate: Vec::new(),
    };
    let composite = normalize_and_compose(&mv, None).unwrap();
    assert_eq!(
        composite.value, 0.64,
        "uniform composite of (0.5, 0.2, 0.7, 0.6, 0.4)"
    );

    // Improving any single metric (raising a higher-is-better one, lowering
    // a lower-is-better one) must strictly raise the composite.
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    for trial in 0..1000 {
        let base = MetricVector {
            acc: rng.gen_range(0.05..0.95),
            ece: rng.gen_range(0.05..0.95),
            auroc: rng.gen_range(0.05..0.95),
            pr_p: rng.gen_range(0.05..0.95),
            pr_n: rng.gen_range(0.05..0.95),
            ifr: 1.0,
            n_scored: 10,
            n_total: 10,
            degenerate: Vec::new(),
        };
        let mut improved = base.clone();
        let which = rng.gen_range(0..5);
        let delta = rng.gen_range(1e-6..0.05);
        match which {
            0 => improved.acc += delta,
            1 => improved.ece -= delta,
            2 => improved.auroc += delta,
            3 => improved.pr_p += delta,
            _ => improved.pr_n -= delta,
        }
        let before = normalize_and_compose(&base, None).unwrap().value;
        let after = normalize_and_compose(&improved, None).unwrap().value;
        assert!(
            after > before,
            "trial {trial}: improving metric {which} by {delta} moved composite {before} -> {after}"
        );
    }
    println!(
        "ACCEPTANCE C3 PASS - composite of (0.5, 0.2, 0.7, 0.6, 0.4) is exactly 0.64 \
         and 1000 single-metric improvements all raised it"
    );
}

// ===========================================================================
// C4 + C5 + C9: planted optimization landscapes
// ===========================================================================

const SOURCE_KEYWORD: &str = "crosscheck";
const TARGET_KEYWORD: &str = "anchor";

/// Sixteen mutation tokens; the planted keywords are among them.
const VOCABULARY: [&str; 16] = [
    "crosscheck",
    "anchor",
    "systematically",
    "deliberately",
    "rigorously",
    "holistically",
    "stepwise",
    "granularly",
    "skeptically",
    "methodically",
    "exhaustively",
    "iteratively",
    "cautiously",
    "structurally",
    "precisely",
    "verifiably",
];

const LANDSCAPE_SEED: u64 = 42;
const LANDSCAPE_ITEMS_PER_DATASET: usize = 50;

fn landscape_dataset_sized(name: &str, n_items: usize) -> Dataset {
    let items = (0..n_items)
        .map(|i| {
            let options: BTreeMap<char, String> =
                [('A', "north"), ('B', "south"), ('C', "east"), ('D', "west")]
                    .iter()
                    .map(|(c, s)| (*c, s.to_string()))
                    .collect();
            TaskItem::new(
                format!("{name}-{i:03}"),
                format!("Synthetic reasoning item {name}-{i:03}: which option is flagged as right?"),
                options,
                ['A', 'B', 'C', 'D'][i % 4],
            )
            .expect("valid item")
        })
        .collect();
    Dataset::new(name, Domain::Synthetic, items).expect("valid dataset")
}

fn landscape_dataset(name: &str) -> Dataset {
    landscape_dataset_sized(name, LANDSCAPE_ITEMS_PER_DATASET)
}

fn landscape_backends(
    keywords: &[(&str, f64)],
) -> (Box<dyn TextBackend>, Box<dyn TextBackend>) {
    let profile = MockProfile {
        keyword_accuracy: keywords
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        base_accuracy: 0.5,
        confidence_noise: 0.9,
        follow_rate: 1.0,
        mutation_vocabulary: VOCABULARY.iter().map(|s| s.to_string()).collect(),
    };
    let reference = build_backend(&BackendConfig::mock(
        BackendKind::MockReference,
        LANDSCAPE_SEED,
        profile.clone(),
    ))
    .unwrap();
    let scorer = build_backend(&BackendConfig::mock(
        BackendKind::MockScorer,
        LANDSCAPE_SEED,
        profile,
    ))
    .unwrap();
    (reference, scorer)
}

fn landscape_config(workers: usize) -> OptimizerConfig {
    OptimizerConfig {
        candidates_per_step: 8,
        max_steps: 200,
        patience: 20,
        exemplar_count: 2,
        rng_seed: LANDSCAPE_SEED,
        workers,
        ..Default::default()
    }
}

/// Run one optimization stage on a planted landscape and return the outcome
/// plus its step transcript with wall-clock noise zeroed.
#[allow(clippy::too_many_arguments)]
fn run_landscape_sized(
    store: &RunStore,
    role: Role,
    dataset_names: (&str, &str),
    items_per_dataset: usize,
    keywords: &[(&str, f64)],
    seeds: Option<&[PromptRecord]>,
    workers: usize,
    run_id: &str,
) -> (StageOutcome, Vec<StepEntry>) {
    let task_set = TaskSet::new(
        role,
        "synthetic reasoning drills over planted keywords",
        vec![
            landscape_dataset_sized(dataset_names.0, items_per_dataset),
            landscape_dataset_sized(dataset_names.1, items_per_dataset),
        ],
    )
    .unwrap();
    let (reference, scorer) = landscape_backends(keywords);
    let outcome = run_stage(
        &landscape_config(workers),
        &task_set,
        reference.as_ref(),
        scorer.as_ref(),
        store,
        seeds,
        Some(run_id.to_string()),
    )
    .expect("landscape run completes");
    let run = store.load_run(run_id).expect("completed run loads");
    let steps: Vec<StepEntry> = run
        .steps
        .into_iter()
        .map(|mut s| {
            s.wall_time_ms = 0;
            s
        })
        .collect();
    (outcome, steps)
}

fn run_landscape(
    store: &RunStore,
    role: Role,
    dataset_names: (&str, &str),
    keywords: &[(&str, f64)],
    seeds: Option<&[PromptRecord]>,
    workers: usize,
    run_id: &str,
) -> (StageOutcome, Vec<StepEntry>) {
    run_landscape_sized(
        store,
        role,
        dataset_names,
        LANDSCAPE_ITEMS_PER_DATASET,
        keywords,
        seeds,
        workers,
        run_id,
    )
}

/// First step index whose running best reaches the threshold.
fn first_step_reaching(steps: &[StepEntry], threshold: f64) -> Option<u64> {
    steps
        .iter()
        .find(|s| s.best_so_far >= threshold)
        .map(|s| s.step)
}

#[test]
fn c4_planted_landscape_converges_deterministically() {
    let started = Instant::now();
    let keywords: &[(&str, f64)] = &[(SOURCE_KEYWORD, 0.95)];
    let names = ("drill-a", "drill-b");

    let mut transcripts = Vec::new();
    for repeat in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path()).unwrap();
        let (outcome, steps) = run_landscape(
            &store,
            Role::Source,
            names,
            keywords,
            None,
            1,
            &format!("landscape-{repeat}"),
        );
        transcripts.push((outcome, steps));
    }
    let (outcome, steps) = &transcripts[0];

    let reached = first_step_reaching(steps, 0.90)
        .unwrap_or_else(|| panic!("best composite never reached 0.90; final {}", outcome.best.composite));
    assert!(
        reached <= 50,
        "composite 0.90 first reached at step {reached}, after the 50-step bound"
    );
    assert_eq!(
        outcome.termination,
        Termination::Stagnated,
        "run must end by stagnation, not budget"
    );
    assert!(
        outcome.steps < 120,
        "stagnation fired at step {}, not before step 120",
        outcome.steps
    );
    assert!(
        outcome.best.text.to_lowercase().contains(SOURCE_KEYWORD),
        "best instruction lacks the planted keyword: {}",
        outcome.best.text
    );

    for (i, (o, s)) in transcripts.iter().enumerate().skip(1) {
        assert_eq!(steps, s, "repeat {i} produced a different transcript");
        assert_eq!(&outcome.pool, &o.pool, "repeat {i} produced a different pool");
        assert_eq!(&outcome.best, &o.best, "repeat {i} produced a different best");
    }

    for workers in [4, 8] {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path()).unwrap();
        let (o, s) = run_landscape(
            &store,
            Role::Source,
            names,
            keywords,
            None,
            workers,
            &format!("landscape-w{workers}"),
        );
        assert_eq!(steps, &s, "worker count {workers} changed the transcript");
        assert_eq!(&outcome.pool, &o.pool, "worker count {workers} changed the pool");
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "landscape acceptance took {elapsed:?}"
    );
    println!(
        "ACCEPTANCE C4 PASS - planted keyword found at step {reached} (best {:.4}), \
         stagnated after step {}, transcript identical across 3 repeats and workers 1/4/8, {elapsed:?}",
        outcome.best.composite, outcome.steps
    );
}

#[test]
fn c5_transferred_seeds_reach_the_target_at_least_as_fast() {
    // Stage 1 on the source landscape.
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let (source_outcome, _) = run_landscape(
        &store,
        Role::Source,
        ("drill-a", "drill-b"),
        &[(SOURCE_KEYWORD, 0.95)],
        None,
        1,
        "stage1",
    );
    assert!(source_outcome
        .best
        .text
        .to_lowercase()
        .contains(SOURCE_KEYWORD));
    let pool = store.load_source_pool("stage1").unwrap();

    // Stage 2: a different planted keyword; the source keyword retains a
    // moderate (0.65) level so transferred prompts start above the origin.
    // Several top source prompts also carry the target keyword latently (on
    // the source it neither helps nor hurts, so such texts tie at the top),
    // which is exactly what makes transfer pay off here: re-evaluating the
    // pool on the target surfaces one immediately.
    let target_keywords: &[(&str, f64)] = &[(TARGET_KEYWORD, 0.95), (SOURCE_KEYWORD, 0.65)];
    let target_names = ("haven-a", "haven-b");
    let target_items = 100;

    let (seeded_outcome, seeded_steps) = run_landscape_sized(
        &store,
        Role::Target,
        target_names,
        target_items,
        target_keywords,
        Some(&pool),
        1,
        "stage2-seeded",
    );
    // Control: same target landscape, same knobs, started from the origin
    // instruction instead of the transferred pool.
    let (_control_outcome, control_steps) = run_landscape_sized(
        &store,
        Role::Source,
        target_names,
        target_items,
        target_keywords,
        None,
        1,
        "stage2-control",
    );

    let seeded_at = first_step_reaching(&seeded_steps, 0.90).unwrap_or_else(|| {
        panic!(
            "seeded stage 2 never reached 0.90; best {}",
            seeded_outcome.best.composite
        )
    });
    match first_step_reaching(&control_steps, 0.90) {
        Some(control_at) => {
            assert!(
                seeded_at <= control_at,
                "seeded run reached 0.90 at step {seeded_at}, control at {control_at}"
            );
            println!(
                "ACCEPTANCE C5 PASS - seeded stage 2 reached 0.90 at step {seeded_at}, \
                 control needed step {control_at}"
            );
        }
        None => {
            println!(
                "ACCEPTANCE C5 PASS - seeded stage 2 reached 0.90 at step {seeded_at}; \
                 the from-origin control never reached it"
            );
        }
    }
    assert!(seeded_outcome
        .best
        .text
        .to_lowercase()
        .contains(TARGET_KEYWORD));
    // Transfer also starts from a stronger baseline than the origin run.
    assert!(
        seeded_steps[0].best_so_far > control_steps[0].best_so_far,
        "transferred seeds ({}) should outscore the origin baseline ({})",
        seeded_steps[0].best_so_far,
        control_steps[0].best_so_far
    );
}

// ===========================================================================
// C6: termination bounds with scripted backends
// ===========================================================================

/// Proposes a fresh bracketed candidate per call.
struct ProbeReference {
    calls: AtomicU64,
}

impl TextBackend for ProbeReference {
    fn id(&self) -> String {
        "probe-reference".into()
    }
    fn generate(&self, _prompt: &str, _params: &GenParams) -> promptshift::Result<String> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(format!("[probe {n}]"))
    }
}

/// Answers 'A' with a confidence that rises for every instruction it has not
/// seen before, so each step's candidate beats the incumbent.
struct RampScorer {
    seen: Mutex<BTreeMap<String, f64>>,
}

impl TextBackend for RampScorer {
    fn id(&self) -> String {
        "ramp-scorer".into()
    }
    fn generate(&self, prompt: &str, _params: &GenParams) -> promptshift::Result<String> {
        let instruction = prompt.split("\n\n").next().unwrap_or("").to_string();
        let mut seen = self.seen.lock().unwrap();
        let next = 0.5 + seen.len() as f64 * 1e-4;
        let c = *seen.entry(instruction).or_insert(next);
        Ok(format!("Answer: A, Confidence: {c:.4}"))
    }
}

/// Same answer and confidence forever: no candidate can improve.
struct ConstScorer;

impl TextBackend for ConstScorer {
    fn id(&self) -> String {
        "const-scorer".into()
    }
    fn generate(&self, _prompt: &str, _params: &GenParams) -> promptshift::Result<String> {
        Ok("Answer: A, Confidence: 0.7000".into())
    }
}

fn tiny_task_set() -> TaskSet {
    let options: BTreeMap<char, String> = [('A', "yes"), ('B', "no"), ('C', "maybe"), ('D', "later")]
        .iter()
        .map(|(c, s)| (*c, s.to_string()))
        .collect();
    let items = vec![
        TaskItem::new("b-00", "bound question zero?", options.clone(), 'A').unwrap(),
        TaskItem::new("b-01", "bound question one?", options, 'A').unwrap(),
    ];
    TaskSet::new(
        Role::Source,
        "termination drills",
        vec![Dataset::new("bound", Domain::Synthetic, items).unwrap()],
    )
    .unwrap()
}

#[test]
fn c6_termination_bounds_are_exact() {
    // Budget: an always-improving scorer runs all 200 steps, no more.
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let config = OptimizerConfig {
        candidates_per_step: 1,
        max_steps: 200,
        patience: 1000,
        exemplar_count: 1,
        ..Default::default()
    };
    let reference = ProbeReference { calls: AtomicU64::new(0) };
    let scorer = RampScorer { seen: Mutex::new(BTreeMap::new()) };
    let outcome = run_stage(
        &config,
        &tiny_task_set(),
        &reference,
        &scorer,
        &store,
        None,
        Some("budget".into()),
    )
    .unwrap();
    assert_eq!(outcome.steps, 200, "budget must be honored exactly");
    assert_eq!(outcome.termination, Termination::MaxStepsReached);
    let run = store.load_run("budget").unwrap();
    assert_eq!(run.steps.len(), 201, "step 0 plus 200 optimization steps");
    for w in run.steps.windows(2) {
        assert!(
            w[1].best_so_far > w[0].best_so_far,
            "the ramp must improve every step"
        );
    }

    // Stagnation: a constant scorer stops after exactly `patience` steps.
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let config = OptimizerConfig {
        candidates_per_step: 2,
        max_steps: 200,
        patience: 20,
        exemplar_count: 1,
        ..Default::default()
    };
    let reference = ProbeReference { calls: AtomicU64::new(0) };
    let outcome = run_stage(
        &config,
        &tiny_task_set(),
        &reference,
        &ConstScorer,
        &store,
        None,
        Some("stagnant".into()),
    )
    .unwrap();
    assert_eq!(outcome.steps, 20, "patience 20 must fire at exactly step 20");
    assert_eq!(outcome.termination, Termination::Stagnated);
    let run = store.load_run("stagnant").unwrap();
    assert_eq!(run.steps.len(), 21);
    let first = run.steps[0].best_so_far;
    assert!(run.steps.iter().all(|s| s.best_so_far == first));

    println!(
        "ACCEPTANCE C6 PASS - 200-step budget honored exactly; patience 20 \
         stagnated at exactly step 20"
    );
}

// ===========================================================================
// C7: scored-history rendering fidelity
// ===========================================================================

#[test]
fn c7_history_rendering_is_faithful_and_round_trips() {
    // The stock origin instruction at composite 0.45 renders verbatim with
    // its integer percent score.
    let rec = record(DEFAULT_ORIGIN_PROMPT, 0.45);
    let rendered = render_history(std::slice::from_ref(&rec), 20);
    assert_eq!(rendered, format!("text: {DEFAULT_ORIGIN_PROMPT}\nscore: 45"));

    // Ascending order and top-k cap on a sorted sample.
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    let pool: Vec<PromptRecord> = (0..25)
        .map(|i| {
            record(
                &format!("sample instruction number {i}"),
                (rng.gen_range(0..=10000) as f64) / 10000.0,
            )
        })
        .collect();
    let pool = dedupe(pool);
    let rendered = render_history(&pool, 20);
    let pairs = parse_history_pairs(&rendered);
    assert_eq!(pairs.len(), 20.min(pool.len()), "top-k cap");
    for w in pairs.windows(2) {
        assert!(w[0].1 <= w[1].1, "history scores must ascend");
    }
    // The selected entries are exactly the top 20 by composite.
    let mut by_score = pool.clone();
    by_score.sort_by(|a, b| {
        b.composite
            .partial_cmp(&a.composite)
            .unwrap()
            .then(a.id.cmp(&b.id))
    });
    let expected: std::collections::BTreeSet<String> =
        by_score.iter().take(20).map(|r| r.text.clone()).collect();
    let got: std::collections::BTreeSet<String> =
        pairs.iter().map(|(t, _)| t.clone()).collect();
    assert_eq!(got, expected, "rendered entries are the top-k by composite");

    // 1,000 random histories round-trip through render + parse.
    for trial in 0..1000 {
        let n = rng.gen_range(1..=40);
        let pool: Vec<PromptRecord> = (0..n)
            .map(|i| {
                let words = rng.gen_range(1..=8);
                let text = (0..words)
                    .map(|w| format!("tok{}", rng.gen_range(0..50) + w))
                    .collect::<Vec<_>>()
                    .join(" ");
                record(
                    &format!("{text} t{trial} i{i}"),
                    (rng.gen_range(0..=10000) as f64) / 10000.0,
                )
            })
            .collect();
        let pool = dedupe(pool);
        let rendered = render_history(&pool, pool.len());
        let pairs = parse_history_pairs(&rendered);
        assert_eq!(pairs.len(), pool.len(), "trial {trial}: pair count");
        for rec in &pool {
            let want = (rec.text.clone(), score_percent(rec.composite));
            assert!(
                pairs.contains(&want),
                "trial {trial}: missing pair {want:?}"
            );
        }
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1, "trial {trial}: scores must ascend");
        }
    }
    println!(
        "ACCEPTANCE C7 PASS - stock pair renders `score: 45` verbatim; 1000 random \
         histories round-trip with ascending scores and the top-k cap"
    );
}

// ===========================================================================
// C8: evaluator instruction-following contracts
// ===========================================================================

#[test]
fn c8_instruction_following_rates_match_the_mode() {
    let profile = MockProfile {
        keyword_accuracy: BTreeMap::new(),
        base_accuracy: 0.7,
        confidence_noise: 0.9,
        follow_rate: 0.82,
        mutation_vocabulary: Vec::new(),
    };
    let scorer = build_backend(&BackendConfig::mock(BackendKind::MockScorer, 7, profile)).unwrap();
    let runner = Runner::new(1).unwrap();

    // Distribution-based scoring always yields an answer: IFR is exactly 1
    // on every dataset, regardless of the mock's follow rate.
    for name in ["logit-a", "logit-b", "logit-c"] {
        let ds = landscape_dataset(name);
        scorer.bind_items(&ds.items);
        let result = evaluate_prompt(
            "Choose the right option.",
            &ds,
            scorer.as_ref(),
            ConfidenceMode::Logits,
            &[],
            1,
            &runner,
        )
        .unwrap();
        assert_eq!(result.metrics.ifr, 1.0, "dataset {name}");
        assert_eq!(result.metrics.n_scored, result.metrics.n_total);
    }

    // Verbalized scoring honors the mock's 0.82 follow rate within the
    // 3-sigma binomial band for 1,000 items.
    let options: BTreeMap<char, String> =
        [('A', "north"), ('B', "south"), ('C', "east"), ('D', "west")]
            .iter()
            .map(|(c, s)| (*c, s.to_string()))
            .collect();
    let items: Vec<TaskItem> = (0..1000)
        .map(|i| {
            TaskItem::new(
                format!("v-{i:04}"),
                format!("Verbalized probe {i:04}: which option is flagged as right?"),
                options.clone(),
                ['A', 'B', 'C', 'D'][i % 4],
            )
            .unwrap()
        })
        .collect();
    let ds = Dataset::new("verbal", Domain::Synthetic, items).unwrap();
    scorer.bind_items(&ds.items);
    let result = evaluate_prompt(
        "Choose the right option.",
        &ds,
        scorer.as_ref(),
        ConfidenceMode::Verbalized,
        &[],
        1,
        &runner,
    )
    .unwrap();
    let ifr = result.metrics.ifr;
    assert!(
        (0.79..=0.85).contains(&ifr),
        "verbalized IFR {ifr} outside [0.79, 0.85]"
    );
    println!(
        "ACCEPTANCE C8 PASS - distribution mode IFR exactly 1.0 on 3 datasets; \
         verbalized IFR {ifr:.4} within [0.79, 0.85] at follow rate 0.82"
    );
}

// ===========================================================================
// C9: crash consistency via log-prefix truncation
// ===========================================================================

#[test]
fn c9_truncated_runs_reload_and_report_without_loss() {
    // A completed landscape run to truncate.
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let (_, full_steps) = run_landscape(
        &store,
        Role::Source,
        ("drill-a", "drill-b"),
        &[(SOURCE_KEYWORD, 0.95)],
        None,
        1,
        "crash-base",
    );
    let base_dir = dir.path().join("crash-base");
    let config_bytes = std::fs::read(base_dir.join("config.json")).unwrap();
    let log = std::fs::read_to_string(base_dir.join("steps.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), full_steps.len());

    let full_curve_path = store
        .export_curve("crash-base", CurveFormat::Csv, None)
        .unwrap();
    let full_curve: Vec<String> = std::fs::read_to_string(&full_curve_path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();

    // Ten random crash points: the log survives as a prefix of whole lines
    // (each step is flushed and synced before the next begins).
    let mut rng = ChaCha8Rng::seed_from_u64(0xC9);
    for trial in 0..10 {
        let keep = rng.gen_range(1..=lines.len());
        let crash_root = dir.path().join(format!("crash-{trial}"));
        let crash_dir = crash_root.join("crashed");
        std::fs::create_dir_all(&crash_dir).unwrap();
        std::fs::write(crash_dir.join("config.json"), &config_bytes).unwrap();
        let mut prefix = lines[..keep].join("\n");
        prefix.push('\n');
        std::fs::write(crash_dir.join("steps.jsonl"), prefix).unwrap();

        let crash_store = RunStore::new(&crash_root).unwrap();
        let run = crash_store
            .load_run("crashed")
            .unwrap_or_else(|e| panic!("trial {trial}: prefix of {keep} lines failed to load: {e}"));
        assert_eq!(run.steps.len(), keep, "trial {trial}: replayed step count");
        for (got, want) in run.steps.iter().zip(full_steps.iter()) {
            let mut got = got.clone();
            got.wall_time_ms = 0;
            assert_eq!(&got, want, "trial {trial}: replayed steps match the prefix");
        }

        let curve_path = crash_store
            .export_curve("crashed", CurveFormat::Csv, None)
            .unwrap();
        let curve: Vec<String> = std::fs::read_to_string(&curve_path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        assert_eq!(curve.len(), keep + 1, "trial {trial}: header plus one row per step");
        assert_eq!(
            curve[..],
            full_curve[..keep + 1],
            "trial {trial}: reported rows must match the original run"
        );
    }
    println!(
        "ACCEPTANCE C9 PASS - 10 random log prefixes of a {}-step run all reload \
         cleanly and report byte-identical curve rows",
        full_steps.len() - 1
    );
}
