//! The optimization loop: propose candidate instructions with a reference
//! model, score them with a scorer model over every dataset in a task set,
//! and keep a growing pool of the best attempts.
//!
//! Two stages share this loop. A source-stage run starts from a single
//! origin instruction; a target-stage run starts from the top instructions
//! of a completed source run, re-evaluated on the target task set before
//! any new proposals are made (step 0 in both cases). The loop then runs
//! whole steps — one reference batch, each surviving candidate evaluated on
//! every dataset — until the step budget runs out or the best composite has
//! not improved by more than `min_improvement` for `patience` consecutive
//! steps. Every step is persisted and synced before the next begins.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{GenParams, TextBackend};
use crate::dataset::{Role, TaskItem, TaskSet};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_prompt, ConfidenceMode};
use crate::exec::Runner;
use crate::hash::{stable_hash, text_id};
use crate::metaprompt::{
    build_reference_prompt, dedupe, dedupe_key, extract_candidate, validate_text,
    MetaPromptTemplate, PromptRecord,
};
use crate::metrics::{MetricName, MetricVector};
use crate::store::{OpenRun, RunStore, StepCandidate, StepEntry};

/// General-knowledge starting instruction used when none is configured.
pub const DEFAULT_ORIGIN_PROMPT: &str = "Answer the following multiple-choice questions by selecting the most accurate option from 'A', 'B', 'C', or 'D'. Use your general knowledge across various domains to provide the best answer.";

/// All knobs of the optimization loop. Deserializes with every field
/// optional; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Reference-model proposals requested per step.
    pub candidates_per_step: usize,
    /// Hard cap on optimization steps (step 0 is not counted).
    pub max_steps: u64,
    /// Consecutive non-improving steps tolerated before stopping.
    pub patience: u64,
    /// A step improves only if the best composite rises by more than this.
    pub min_improvement: f64,
    /// How many pool entries the reference model sees as history.
    pub top_k_history: usize,
    /// How many top source prompts seed a target-stage run.
    pub seed_pool_size: usize,
    /// The instruction a source-stage run starts from.
    pub origin_prompt: String,
    /// How the scorer expresses confidence.
    pub confidence_mode: ConfidenceMode,
    /// Solved examples shown per scorer query and in the meta-prompt.
    pub exemplar_count: usize,
    /// Master seed; every derived seed is a stable hash below it.
    pub rng_seed: u64,
    /// Built-in meta-prompt template name.
    pub template_id: String,
    /// Hard cap on extracted candidate length, in characters.
    pub candidate_max_chars: usize,
    /// Worker threads for per-item scoring.
    pub workers: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            candidates_per_step: 8,
            max_steps: 200,
            patience: 20,
            min_improvement: 1e-6,
            top_k_history: 20,
            seed_pool_size: 4,
            origin_prompt: DEFAULT_ORIGIN_PROMPT.to_string(),
            confidence_mode: ConfidenceMode::Verbalized,
            exemplar_count: 3,
            rng_seed: 0,
            template_id: "gpt-style".to_string(),
            candidate_max_chars: 500,
            workers: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 5] = [
            ("candidates_per_step", self.candidates_per_step),
            ("top_k_history", self.top_k_history),
            ("seed_pool_size", self.seed_pool_size),
            ("candidate_max_chars", self.candidate_max_chars),
            ("workers", self.workers),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !self.min_improvement.is_finite() || self.min_improvement < 0.0 {
            return Err(Error::Config(format!(
                "min_improvement must be a finite non-negative number, got {}",
                self.min_improvement
            )));
        }
        validate_text(&self.origin_prompt)?;
        Ok(())
    }
}

/// Why a stage stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `patience` consecutive steps without sufficient improvement.
    Stagnated,
    /// The `max_steps` budget was spent.
    MaxStepsReached,
}

/// The result of one completed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub run_id: String,
    /// Every distinct instruction tried, best first.
    pub pool: Vec<PromptRecord>,
    pub best: PromptRecord,
    pub termination: Termination,
    /// Optimization steps executed (excluding the step-0 seed evaluation).
    pub steps: u64,
}

/// Decide whether the loop should stop before executing another step.
/// The step budget is checked before stagnation.
pub fn check_termination(
    steps_executed: u64,
    steps_since_improvement: u64,
    config: &OptimizerConfig,
) -> Option<Termination> {
    if steps_executed >= config.max_steps {
        Some(Termination::MaxStepsReached)
    } else if steps_since_improvement >= config.patience {
        Some(Termination::Stagnated)
    } else {
        None
    }
}

/// The top `n` records by composite (ties broken by id), used to carry a
/// source pool onto a target stage.
pub fn select_seeds(pool: &[PromptRecord], n: usize) -> Vec<PromptRecord> {
    let mut sorted: Vec<&PromptRecord> = pool.iter().collect();
    sorted.sort_by(|a, b| {
        b.composite
            .partial_cmp(&a.composite)
            .expect("finite composites")
            .then_with(|| a.id.cmp(&b.id))
    });
    sorted.into_iter().take(n).cloned().collect()
}

fn best_of(pool: &[PromptRecord]) -> &PromptRecord {
    pool.iter()
        .reduce(|best, r| {
            if r.composite > best.composite
                || (r.composite == best.composite && r.id < best.id)
            {
                r
            } else {
                best
            }
        })
        .expect("pool is never empty")
}

/// Field-wise mean of per-dataset metric vectors; counts are summed and
/// degenerate flags unioned.
fn aggregate_metrics(per_dataset: &BTreeMap<String, MetricVector>) -> MetricVector {
    let d = per_dataset.len() as f64;
    let mut acc = 0.0;
    let mut ece = 0.0;
    let mut auroc = 0.0;
    let mut pr_p = 0.0;
    let mut pr_n = 0.0;
    let mut ifr = 0.0;
    let mut n_scored = 0;
    let mut n_total = 0;
    let mut degenerate: Vec<MetricName> = Vec::new();
    for v in per_dataset.values() {
        acc += v.acc;
        ece += v.ece;
        auroc += v.auroc;
        pr_p += v.pr_p;
        pr_n += v.pr_n;
        ifr += v.ifr;
        n_scored += v.n_scored;
        n_total += v.n_total;
        degenerate.extend(v.degenerate.iter().copied());
    }
    degenerate.sort();
    degenerate.dedup();
    MetricVector {
        acc: acc / d,
        ece: ece / d,
        auroc: auroc / d,
        pr_p: pr_p / d,
        pr_n: pr_n / d,
        ifr: ifr / d,
        n_scored,
        n_total,
        degenerate,
    }
}

/// One candidate evaluated across the whole task set.
struct Evaluated {
    candidate: StepCandidate,
    record: PromptRecord,
}

struct StageContext<'a> {
    config: &'a OptimizerConfig,
    task_set: &'a TaskSet,
    scorer: &'a dyn TextBackend,
    runner: Runner,
    /// Per-dataset scorer exemplars, fixed for the whole run.
    scorer_exemplars: BTreeMap<String, Vec<TaskItem>>,
    /// Scorer calls spent so far (one per item per candidate per dataset).
    scorer_calls: u64,
}

impl StageContext<'_> {
    /// Evaluate one instruction on every dataset and aggregate.
    fn evaluate_text(
        &mut self,
        text: &str,
        step: u64,
        parent_ids: Vec<String>,
    ) -> Result<Evaluated> {
        let mut per_dataset: BTreeMap<String, MetricVector> = BTreeMap::new();
        let mut per_dataset_composite: BTreeMap<String, f64> = BTreeMap::new();
        for dataset in &self.task_set.datasets {
            let eval_seed = stable_hash(&[
                "eval",
                &self.config.rng_seed.to_string(),
                &dataset.name,
                &text_id(text),
            ]);
            let result = evaluate_prompt(
                text,
                dataset,
                self.scorer,
                self.config.confidence_mode,
                &self.scorer_exemplars[&dataset.name],
                eval_seed,
                &self.runner,
            )?;
            self.scorer_calls += dataset.len() as u64;
            per_dataset.insert(dataset.name.clone(), result.metrics);
            per_dataset_composite.insert(dataset.name.clone(), result.composite.value);
        }
        let composite = per_dataset_composite.values().sum::<f64>()
            / per_dataset_composite.len() as f64;
        let metric_vector = aggregate_metrics(&per_dataset);
        let record = PromptRecord::new(
            text,
            composite,
            metric_vector,
            self.task_set.role,
            step,
            parent_ids,
        )?;
        let candidate = StepCandidate {
            text: record.text.clone(),
            id: record.id.clone(),
            per_dataset,
            per_dataset_composite,
            composite,
        };
        Ok(Evaluated { candidate, record })
    }

    /// Evaluate a batch (already deduplicated), in ascending id order.
    fn evaluate_batch(
        &mut self,
        texts: Vec<(String, Vec<String>)>,
        step: u64,
    ) -> Result<Vec<Evaluated>> {
        let mut ordered = texts;
        ordered.sort_by_key(|(text, _)| text_id(text));
        ordered
            .into_iter()
            .map(|(text, parents)| self.evaluate_text(&text, step, parents))
            .collect()
    }

    /// Meta-prompt exemplars for one step, drawn across all datasets.
    fn meta_exemplars(&self, step: u64) -> Vec<TaskItem> {
        let total: usize = self.task_set.datasets.iter().map(|d| d.len()).sum();
        let n = self.config.exemplar_count.min(total);
        let mut indices: Vec<usize> = (0..total).collect();
        let seed = stable_hash(&[
            "meta-exemplars",
            &self.config.rng_seed.to_string(),
            &step.to_string(),
        ]);
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut chosen = indices[..n].to_vec();
        chosen.sort_unstable();
        chosen
            .into_iter()
            .map(|mut flat| {
                for dataset in &self.task_set.datasets {
                    if flat < dataset.len() {
                        return dataset.items[flat].clone();
                    }
                    flat -= dataset.len();
                }
                unreachable!("flat index within total item count")
            })
            .collect()
    }
}

/// Run one full optimization stage.
///
/// A source stage starts from `config.origin_prompt`; a target stage starts
/// from `seed_pool` (the loaded pool of a completed source run). The run is
/// recorded in `store` as it happens; the returned outcome mirrors the
/// persisted artifacts.
pub fn run_stage(
    config: &OptimizerConfig,
    task_set: &TaskSet,
    reference: &dyn TextBackend,
    scorer: &dyn TextBackend,
    store: &RunStore,
    seed_pool: Option<&[PromptRecord]>,
    run_id: Option<String>,
) -> Result<StageOutcome> {
    config.validate()?;
    let seeds: Vec<(String, Vec<String>)> = match (task_set.role, seed_pool) {
        (Role::Source, None) => vec![(validate_text(&config.origin_prompt)?, Vec::new())],
        (Role::Source, Some(_)) => {
            return Err(Error::Config(
                "a source-stage run starts from the origin prompt, not a seed pool".into(),
            ))
        }
        (Role::Target, Some(pool)) => {
            if pool.is_empty() {
                return Err(Error::Config("seed pool is empty".into()));
            }
            select_seeds(pool, config.seed_pool_size)
                .into_iter()
                .map(|r| (r.text.clone(), vec![r.id]))
                .collect()
        }
        (Role::Target, None) => {
            return Err(Error::Config(
                "a target-stage run needs the pool of a completed source run".into(),
            ))
        }
    };

    let template = MetaPromptTemplate::builtin(&config.template_id)?
        .with_task_description(&task_set.description);

    // Give the scorer every item it may be asked about.
    let all_items: Vec<TaskItem> = task_set
        .datasets
        .iter()
        .flat_map(|d| d.items.iter().cloned())
        .collect();
    scorer.bind_items(&all_items);

    let scorer_exemplars: BTreeMap<String, Vec<TaskItem>> = task_set
        .datasets
        .iter()
        .map(|dataset| {
            let seed = stable_hash(&[
                "scorer-exemplars",
                &config.rng_seed.to_string(),
                &dataset.name,
            ]);
            let n = config.exemplar_count.min(dataset.len());
            crate::dataset::sample_exemplars(dataset, n, seed)
                .map(|items| (dataset.name.clone(), items))
        })
        .collect::<Result<_>>()?;

    let mut ctx = StageContext {
        config,
        task_set,
        scorer,
        runner: Runner::new(config.workers)?,
        scorer_exemplars,
        scorer_calls: 0,
    };

    let mut run = store.create_run(
        task_set.role,
        serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
        run_id,
    )?;

    // Step 0: evaluate the seeds to put a baseline in the pool.
    let started = Instant::now();
    let evaluated = ctx.evaluate_batch(seeds, 0)?;
    let mut pool: Vec<PromptRecord> =
        dedupe(evaluated.iter().map(|e| e.record.clone()).collect());
    record_entry(&mut run, 0, &evaluated, &pool, &ctx, started)?;

    let mut steps_executed: u64 = 0;
    let mut since_improvement: u64 = 0;

    let termination = loop {
        if let Some(term) = check_termination(steps_executed, since_improvement, config) {
            break term;
        }
        let step = steps_executed + 1;
        let started = Instant::now();

        // Propose candidates: sequential reference calls so any call counter
        // inside the backend advances in a reproducible order.
        let reference_prompt = build_reference_prompt(
            &template,
            &pool,
            &ctx.meta_exemplars(step),
            config.top_k_history,
        )?;
        let incumbent_id = best_of(&pool).id.clone();
        let mut seen: HashSet<String> = pool.iter().map(|r| dedupe_key(&r.text)).collect();
        let mut batch: Vec<(String, Vec<String>)> = Vec::new();
        for i in 0..config.candidates_per_step {
            let params = GenParams::reference().with_seed(stable_hash(&[
                "ref",
                &config.rng_seed.to_string(),
                &step.to_string(),
                &i.to_string(),
            ]));
            let completion = reference.generate(&reference_prompt, &params)?;
            let text = match extract_candidate(&completion, config.candidate_max_chars) {
                Ok(text) => match validate_text(&text) {
                    Ok(normalized) => normalized,
                    // Malformed proposals are discarded, not fatal.
                    Err(_) => continue,
                },
                Err(Error::EmptyCandidate) | Err(Error::CandidateTooLong { .. }) => continue,
                Err(e) => return Err(e),
            };
            if seen.insert(dedupe_key(&text)) {
                batch.push((text, vec![incumbent_id.clone()]));
            }
        }

        let evaluated = ctx.evaluate_batch(batch, step)?;
        let previous_best = best_of(&pool).composite;
        pool.extend(evaluated.iter().map(|e| e.record.clone()));
        pool = dedupe(pool);
        let improvement = best_of(&pool).composite - previous_best;
        if improvement > config.min_improvement {
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        steps_executed = step;
        record_entry(&mut run, step, &evaluated, &pool, &ctx, started)?;
    };

    let mut final_pool = pool.clone();
    final_pool.sort_by(|a, b| {
        b.composite
            .partial_cmp(&a.composite)
            .expect("finite composites")
            .then_with(|| a.id.cmp(&b.id))
    });
    let best = final_pool[0].clone();
    run.finish(&final_pool, &best)?;

    Ok(StageOutcome {
        run_id: run.run_id().to_string(),
        pool: final_pool,
        best,
        termination,
        steps: steps_executed,
    })
}

fn record_entry(
    run: &mut OpenRun,
    step: u64,
    evaluated: &[Evaluated],
    pool: &[PromptRecord],
    ctx: &StageContext<'_>,
    started: Instant,
) -> Result<()> {
    let entry = StepEntry {
        step,
        candidates: evaluated.iter().map(|e| e.candidate.clone()).collect(),
        best_so_far: best_of(pool).composite,
        wall_time_ms: started.elapsed().as_millis() as u64,
        scorer_calls: ctx.scorer_calls,
    };
    run.record_step(&entry)
}
