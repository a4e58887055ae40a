//! Multi-seed episodes: ICL baseline (one window) against parallel windows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Record};
use super::metrics::{best_of, exact_match, token_f1};
use super::stats::{mean, std_dev, welch_t_test, StdKind, WelchResult};
use super::trie::{build_label_trie_with, constrained_decode, LabelTrie};
use crate::error::{Error, Result};
use crate::model::{greedy_generate, Model, ParallelContext, StopAfter};
use crate::packer::{
    check_fit, compute_n_max, pack, render_document_windows, render_windows, sample_examples, task_text, Example,
    Metric, PackingBudget, TaskTemplate,
};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Few-shot classification with label-restricted decoding.
    #[default]
    Icl,
    /// Question answering over retrieved documents split across windows.
    Docs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocAssignment {
    /// Rank `r` goes to window `r mod B`; each window ends with its best
    /// ranked document.
    #[default]
    RankRoundRobin,
    /// Seeded shuffle, then dealt round-robin.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub b: usize,
    pub n_sets: usize,
    pub test_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub std_kind: StdKind,
    /// Overrides the computed per-window example budget.
    pub n_max: Option<usize>,
    pub doc_assignment: DocAssignment,
    /// Docs mode: documents kept per window (all when unset).
    pub docs_per_window: Option<usize>,
    /// Docs mode: few-shot examples replicated at the head of every window.
    pub prefix_examples: usize,
    /// Docs mode: generation limit per answer.
    pub max_new_tokens: usize,
    /// Echoed into reports.
    pub model_name: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            b: 3,
            n_sets: 30,
            test_size: 250,
            seed: 0,
            mode: Mode::Icl,
            std_kind: StdKind::Population,
            n_max: None,
            doc_assignment: DocAssignment::RankRoundRobin,
            docs_per_window: None,
            prefix_examples: 0,
            max_new_tokens: 16,
            model_name: String::new(),
        }
    }
}

impl ExperimentConfig {
    /// Training-sample seeds, one per set.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_sets as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Seed for test subsampling, decoupled from the training seeds.
    pub fn test_seed(&self) -> u64 {
        self.seed ^ 0x7e57_5eed_0000_0000
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub model: String,
    pub dataset: String,
    pub mode: Mode,
    pub metric: Metric,
    pub b: usize,
    pub n_max: usize,
    pub seeds: Vec<u64>,
    pub test_seed: u64,
    pub test_size: usize,
    pub std_kind: StdKind,
    pub significance_test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub config: ReportConfig,
    pub per_seed_scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub p_value_vs_baseline: Option<f64>,
}

impl EpisodeReport {
    pub fn new(config: ReportConfig, per_seed_scores: Vec<f64>) -> Self {
        let std = std_dev(&per_seed_scores, config.std_kind);
        Self {
            mean: mean(&per_seed_scores),
            std,
            config,
            per_seed_scores,
            p_value_vs_baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub budget: Option<PackingBudget>,
    pub baseline: EpisodeReport,
    pub pcw: EpisodeReport,
    /// `None` when the test is undefined (fewer than two sets, or constant
    /// differing scores).
    pub welch: Option<WelchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub budget: Option<PackingBudget>,
    pub baseline: EpisodeReport,
    pub rows: Vec<EpisodeReport>,
}

/// One seed's outcome: the score and each test example's prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub score: f64,
    pub predictions: Vec<String>,
    pub example_scores: Vec<f64>,
}

/// Shared state for running episodes on one model, tokenizer and task.
pub struct Evaluator<'a> {
    model: &'a Model,
    tokenizer: &'a dyn Tokenizer,
    template: &'a TaskTemplate,
    train: Vec<Example>,
    train_lengths: Vec<usize>,
    test: Vec<Record>,
    trie: Option<LabelTrie>,
    separator: u32,
    bos: Option<u32>,
    dataset_name: String,
    config: ExperimentConfig,
}

impl<'a> Evaluator<'a> {
    /// Splits data into a training pool and a test subsample of at most
    /// `test_size`. Without a separate `test` set, the test subsample is
    /// held out of `train`.
    pub fn new(
        model: &'a Model,
        tokenizer: &'a dyn Tokenizer,
        template: &'a TaskTemplate,
        train: &Dataset,
        test: Option<&Dataset>,
        config: ExperimentConfig,
    ) -> Result<Self> {
        template.validate()?;
        if config.n_sets == 0 || config.test_size == 0 {
            return Err(Error::Config("n_sets and test_size must be positive".into()));
        }
        let sep = tokenizer.encode(&template.example_separator);
        let [separator] = sep[..] else {
            return Err(Error::Template(format!(
                "example separator {:?} must encode to exactly one token, got {}",
                template.example_separator,
                sep.len()
            )));
        };

        let test_source = test.unwrap_or(train);
        let take = config.test_size.min(test_source.len());
        let test_idx = {
            let mut idx = sample_examples(test_source.len(), take, config.test_seed())?;
            idx.sort_unstable();
            idx
        };
        let test_records: Vec<Record> = test_idx.iter().map(|&i| test_source.records[i].clone()).collect();
        let train_records: Vec<&Record> = match test {
            Some(_) => train.records.iter().collect(),
            None => train
                .records
                .iter()
                .enumerate()
                .filter(|(i, _)| test_idx.binary_search(i).is_err())
                .map(|(_, r)| r)
                .collect(),
        };
        let train_examples: Vec<Example> = train_records.iter().map(|r| r.example()).collect();
        let train_lengths = train_examples
            .iter()
            .map(|e| tokenizer.encode(&template.render_example(e)).len() + 1)
            .collect();

        let trie = match config.mode {
            Mode::Icl => {
                let labels = train
                    .label_set
                    .clone()
                    .or_else(|| template.label_names.clone())
                    .ok_or_else(|| Error::Config("classification needs a label set".into()))?;
                Some(build_label_trie_with(&labels, tokenizer, separator, |l| {
                    template.completion(l)
                })?)
            }
            Mode::Docs => None,
        };
        if let Some(t) = &trie {
            if let Some(r) = test_records.iter().find(|r| !t.labels().contains(&r.output)) {
                return Err(Error::Config(format!(
                    "test output `{}` is outside the label set",
                    r.output
                )));
            }
        }

        Ok(Self {
            model,
            tokenizer,
            template,
            train: train_examples,
            train_lengths,
            test: test_records,
            trie,
            separator,
            bos: model.config().bos_token_id,
            dataset_name: train.name.clone(),
            config,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn test_records(&self) -> &[Record] {
        &self.test
    }

    pub fn trie(&self) -> Option<&LabelTrie> {
        self.trie.as_ref()
    }

    /// Tokens that may be pushed during decoding after the task prompt.
    fn decode_headroom(&self) -> usize {
        self.trie.as_ref().map_or(0, |t| t.max_depth().saturating_sub(1))
    }

    /// Per-window example budget for the current data (ICL mode).
    pub fn budget(&self) -> Result<PackingBudget> {
        let test_lengths: Vec<usize> = self
            .test
            .iter()
            .map(|r| self.tokenizer.encode(&task_text(self.template, &r.input)).len())
            .collect();
        let capacity = self
            .model
            .config()
            .max_positions
            .checked_sub(usize::from(self.bos.is_some()) + self.decode_headroom())
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::Budget("no positions left after BOS and decoding headroom".into()))?;
        let mut budget = compute_n_max(&self.train_lengths, &test_lengths, capacity)?;
        if let Some(n) = self.config.n_max {
            budget.n_max = n;
        }
        Ok(budget)
    }

    /// Scores every test example for one training seed with `b` windows.
    pub fn run_seed(&self, b: usize, n_max: usize, seed: u64) -> Result<SeedOutcome> {
        self.run_seed_on(b, n_max, seed, &self.test)
    }

    /// [`Evaluator::run_seed`] over an explicit list of test records.
    pub fn run_seed_on(&self, b: usize, n_max: usize, seed: u64, test: &[Record]) -> Result<SeedOutcome> {
        if test.is_empty() {
            return Err(Error::Config("no test examples".into()));
        }
        let results: Vec<(String, f64)> = match self.config.mode {
            Mode::Icl => self.run_icl(b, n_max, seed, test)?,
            Mode::Docs => self.run_docs(b, seed, test)?,
        };
        let (predictions, example_scores): (Vec<String>, Vec<f64>) = results.into_iter().unzip();
        // summing in sorted order keeps the score independent of test order
        let mut sorted = example_scores.clone();
        sorted.sort_by(f64::total_cmp);
        let score = 100.0 * sorted.iter().sum::<f64>() / sorted.len() as f64;
        Ok(SeedOutcome {
            score,
            predictions,
            example_scores,
        })
    }

    fn run_icl(&self, b: usize, n_max: usize, seed: u64, test: &[Record]) -> Result<Vec<(String, f64)>> {
        let trie = self.trie.as_ref().expect("icl mode builds a trie");
        let assignment = pack(&self.train_lengths, b, n_max, seed)?;
        let (texts, _) = render_windows(&assignment, &self.train, self.template, "")?;
        let windows: Vec<Vec<u32>> = texts.iter().map(|t| self.tokenizer.encode(t)).collect();
        let window_lengths: Vec<usize> = windows.iter().map(Vec::len).collect();
        let ctx = ParallelContext::encode(self.model, &windows, self.bos)?;
        let segments = ctx.segments();
        let capacity = self.model.config().max_positions;
        test.par_iter()
            .map(|r| {
                let task = self.tokenizer.encode(&task_text(self.template, &r.input));
                check_fit(
                    &window_lengths,
                    task.len() + self.decode_headroom(),
                    capacity,
                    self.bos.is_some(),
                )?;
                let label = constrained_decode(self.model, &segments, &task, &ctx.task_positions(task.len()), trie)?;
                let pred = trie.labels()[label].clone();
                let score = f64::from(u8::from(pred == r.output));
                Ok((pred, score))
            })
            .collect()
    }

    fn run_docs(&self, b: usize, seed: u64, test: &[Record]) -> Result<Vec<(String, f64)>> {
        if b == 0 {
            return Err(Error::Config("at least one window is required".into()));
        }
        let prefix: Vec<Example> = sample_examples(self.train.len(), self.config.prefix_examples, seed)?
            .into_iter()
            .map(|i| self.train[i].clone())
            .collect();
        let capacity = self.model.config().max_positions;
        let metric = self.template.metric;
        test.par_iter()
            .map(|r| {
                let docs = self.assign_documents(r, b, seed);
                let (texts, task_text) = render_document_windows(&prefix, &docs, self.template, &r.input)?;
                let windows: Vec<Vec<u32>> = texts.iter().map(|t| self.tokenizer.encode(t)).collect();
                let task = self.tokenizer.encode(&task_text);
                let lengths: Vec<usize> = windows.iter().map(Vec::len).collect();
                check_fit(&lengths, task.len() + 1, capacity, self.bos.is_some())?;
                let ctx = ParallelContext::encode(self.model, &windows, self.bos)?;
                let positions = ctx.task_positions(task.len());
                let room = capacity - positions.last().expect("task is non-empty");
                let max_new = self.config.max_new_tokens.min(room).max(1);
                let stop = StopAfter(vec![self.separator]);
                let mut out = greedy_generate(self.model, &ctx.segments(), &task, &positions, max_new, Some(&stop))?;
                if out.last() == Some(&self.separator) {
                    out.pop();
                }
                let pred = self.tokenizer.decode(&out)?.trim().to_string();
                let golds = r.golds();
                let score = match metric {
                    Metric::F1 => best_of(&pred, &golds, token_f1),
                    Metric::ExactMatch | Metric::Accuracy => best_of(&pred, &golds, exact_match),
                };
                Ok((pred, score))
            })
            .collect()
    }

    /// Rendered documents per window for one question. Windows left without
    /// documents (fewer documents than windows) are dropped, keeping at
    /// least one.
    pub fn assign_documents(&self, record: &Record, b: usize, seed: u64) -> Vec<Vec<String>> {
        let mut ranked: Vec<usize> = (0..record.documents.len()).collect();
        if self.config.doc_assignment == DocAssignment::Random {
            let mut h = ChaCha8Rng::seed_from_u64(seed);
            // per-question stream so test order does not matter
            let salt: u64 = record.input.bytes().fold(0xcbf2_9ce4_8422_2325, |acc, c| {
                (acc ^ u64::from(c)).wrapping_mul(0x100_0000_01b3)
            });
            h.set_stream(salt);
            ranked.shuffle(&mut h);
        }
        let mut windows: Vec<Vec<usize>> = vec![Vec::new(); b];
        for (r, &doc) in ranked.iter().enumerate() {
            windows[r % b].push(doc);
        }
        for w in &mut windows {
            if let Some(k) = self.config.docs_per_window {
                w.truncate(k);
            }
            // best ranked last
            w.reverse();
        }
        windows.retain(|w| !w.is_empty());
        if windows.is_empty() {
            windows.push(Vec::new());
        }
        windows
            .into_iter()
            .map(|w| w.into_iter().map(|d| record.documents[d].render()).collect())
            .collect()
    }

    fn report(&self, b: usize, n_max: usize, scores: Vec<f64>) -> EpisodeReport {
        EpisodeReport::new(
            ReportConfig {
                model: self.config.model_name.clone(),
                dataset: self.dataset_name.clone(),
                mode: self.config.mode,
                metric: self.template.metric,
                b,
                n_max,
                seeds: self.config.seeds(),
                test_seed: self.config.test_seed(),
                test_size: self.test.len(),
                std_kind: self.config.std_kind,
                significance_test: "welch".into(),
            },
            scores,
        )
    }

    fn n_max(&self) -> Result<(Option<PackingBudget>, usize)> {
        match self.config.mode {
            Mode::Icl => {
                let budget = self.budget()?;
                let n = budget.n_max;
                Ok((Some(budget), n))
            }
            Mode::Docs => Ok((None, self.config.prefix_examples)),
        }
    }

    /// Reports for `b` windows over all seeds.
    pub fn episode(&self, b: usize, n_max: usize) -> Result<EpisodeReport> {
        let scores = self
            .config
            .seeds()
            .into_par_iter()
            .map(|s| self.run_seed(b, n_max, s).map(|o| o.score))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.report(b, n_max, scores))
    }
}

fn compare(baseline: &EpisodeReport, pcw: &mut EpisodeReport) -> Option<WelchResult> {
    let w = welch_t_test(&pcw.per_seed_scores, &baseline.per_seed_scores).ok();
    pcw.p_value_vs_baseline = w.map(|w| w.p);
    w
}

/// ICL baseline (one window, `n_max` examples) and PCW (`b` windows,
/// `b·n_max` examples) over the same training seeds.
pub fn run_experiment(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    train: &Dataset,
    test: Option<&Dataset>,
    template: &TaskTemplate,
    config: ExperimentConfig,
) -> Result<ExperimentReport> {
    let b = config.b;
    let ev = Evaluator::new(model, tokenizer, template, train, test, config)?;
    let (budget, n_max) = ev.n_max()?;
    let baseline = ev.episode(1, n_max)?;
    let mut pcw = ev.episode(b, n_max)?;
    let welch = compare(&baseline, &mut pcw);
    Ok(ExperimentReport {
        budget,
        baseline,
        pcw,
        welch,
    })
}

/// One PCW row per value of `b`, each compared against the shared baseline.
pub fn sweep_b(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    train: &Dataset,
    test: Option<&Dataset>,
    template: &TaskTemplate,
    config: ExperimentConfig,
    bs: &[usize],
) -> Result<SweepReport> {
    if bs.is_empty() {
        return Err(Error::Config("empty range of window counts".into()));
    }
    let ev = Evaluator::new(model, tokenizer, template, train, test, config)?;
    let (budget, n_max) = ev.n_max()?;
    let baseline = ev.episode(1, n_max)?;
    let rows = bs
        .iter()
        .map(|&b| {
            let mut row = ev.episode(b, n_max)?;
            compare(&baseline, &mut row);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { budget, baseline, rows })
}
