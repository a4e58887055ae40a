//! Splitting in-context examples across parallel windows.
//!
//! The per-window example budget is
//! `n_max = floor((N − T_max) / D_90)`, where `T_max` is the longest test
//! prompt and `D_90` the 90th-percentile training example length, both after
//! dropping the longest 1% (`ceil(0.01·n)`, nearest-rank percentiles).
//! `B·n_max` examples are then sampled and dealt into `B` windows of exactly
//! `n_max` each, with single-example swaps evening out window token totals.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingBudget {
    pub n_max: usize,
    pub t_max: usize,
    pub d_90: usize,
    pub trimmed_train: usize,
    pub trimmed_test: usize,
}

/// Indices of the samples kept after dropping the `ceil(0.01·n)` longest
/// (ties broken towards dropping later indices). At least one sample is
/// always kept. Returned in ascending index order.
pub fn trim_longest(lengths: &[usize]) -> Vec<usize> {
    let n = lengths.len();
    let drop = n.div_ceil(100).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut kept = order[..n - drop].to_vec();
    kept.sort_unstable();
    kept
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 · n)` of
/// the sorted sample.
pub fn nearest_rank(values: &[usize], percent: usize) -> Option<usize> {
    if values.is_empty() || percent == 0 || percent > 100 {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = (percent * sorted.len()).div_ceil(100);
    Some(sorted[rank - 1])
}

pub fn compute_n_max(train_lengths: &[usize], test_lengths: &[usize], capacity: usize) -> Result<PackingBudget> {
    if train_lengths.is_empty() || test_lengths.is_empty() {
        return Err(Error::Budget("train and test length lists must be non-empty".into()));
    }
    if capacity == 0 {
        return Err(Error::Budget("capacity must be positive".into()));
    }
    let train: Vec<usize> = trim_longest(train_lengths)
        .into_iter()
        .map(|i| train_lengths[i])
        .collect();
    let test: Vec<usize> = trim_longest(test_lengths)
        .into_iter()
        .map(|i| test_lengths[i])
        .collect();
    let t_max = *test.iter().max().expect("non-empty");
    let d_90 = nearest_rank(&train, 90).expect("non-empty");
    if d_90 == 0 {
        return Err(Error::Budget("90th-percentile train length is zero".into()));
    }
    if capacity < t_max {
        return Err(Error::Budget(format!(
            "longest test prompt ({t_max} tokens) exceeds capacity {capacity}"
        )));
    }
    Ok(PackingBudget {
        n_max: (capacity - t_max) / d_90,
        t_max,
        d_90,
        trimmed_train: train_lengths.len() - train.len(),
        trimmed_test: test_lengths.len() - test.len(),
    })
}

/// Example indices per window, with each window's token total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowAssignment {
    pub windows: Vec<Vec<usize>>,
    pub totals: Vec<usize>,
}

impl WindowAssignment {
    pub fn spread(&self) -> usize {
        spread(&self.totals)
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }
}

fn spread(totals: &[usize]) -> usize {
    totals.iter().max().unwrap_or(&0) - totals.iter().min().unwrap_or(&0)
}

/// Draws `count` distinct example indices in random order.
pub fn sample_examples(pool: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > pool {
        return Err(Error::Packing(format!(
            "need {count} examples but only {pool} are available"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, pool, count).into_vec())
}

/// Samples `b·n_max` examples and balances them into `b` windows.
pub fn pack(example_lengths: &[usize], b: usize, n_max: usize, seed: u64) -> Result<WindowAssignment> {
    if b == 0 {
        return Err(Error::Packing("at least one window is required".into()));
    }
    if n_max == 0 {
        return Err(Error::Packing("n_max is 0: no examples fit beside the task".into()));
    }
    let chosen = sample_examples(example_lengths.len(), b * n_max, seed)?;
    Ok(balance(example_lengths, &chosen, b))
}

/// Deals `chosen` (whose length must be a multiple of `b`) into `b` equal-count
/// windows: descending-length snake order, then repeated best single swaps
/// between the heaviest and lightest window until none narrows the spread.
/// Within a window, examples keep their order in `chosen`.
pub fn balance(lengths: &[usize], chosen: &[usize], b: usize) -> WindowAssignment {
    let mut by_len: Vec<usize> = (0..chosen.len()).collect();
    by_len.sort_by(|&x, &y| lengths[chosen[y]].cmp(&lengths[chosen[x]]));
    // slots hold positions into `chosen`
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); b];
    for (i, &c) in by_len.iter().enumerate() {
        let round = i / b;
        let w = if round.is_multiple_of(2) { i % b } else { b - 1 - i % b };
        slots[w].push(c);
    }
    let len_of = |c: usize| lengths[chosen[c]];
    let mut totals: Vec<usize> = slots.iter().map(|s| s.iter().map(|&c| len_of(c)).sum()).collect();

    loop {
        let heavy = (0..b)
            .max_by_key(|&w| (totals[w], std::cmp::Reverse(w)))
            .expect("b ≥ 1");
        let light = (0..b).min_by_key(|&w| (totals[w], w)).expect("b ≥ 1");
        let current = spread(&totals);
        if current == 0 || heavy == light {
            break;
        }
        let mut best: Option<(usize, usize, usize)> = None;
        for (hi, &hc) in slots[heavy].iter().enumerate() {
            for (li, &lc) in slots[light].iter().enumerate() {
                let (hl, ll) = (len_of(hc), len_of(lc));
                if hl <= ll {
                    continue;
                }
                let mut t = totals.clone();
                t[heavy] = t[heavy] - hl + ll;
                t[light] = t[light] - ll + hl;
                let s = spread(&t);
                if s < current && best.is_none_or(|(bs, _, _)| s < bs) {
                    best = Some((s, hi, li));
                }
            }
        }
        let Some((_, hi, li)) = best else { break };
        let (hc, lc) = (slots[heavy][hi], slots[light][li]);
        slots[heavy][hi] = lc;
        slots[light][li] = hc;
        totals[heavy] = totals[heavy] - len_of(hc) + len_of(lc);
        totals[light] = totals[light] - len_of(lc) + len_of(hc);
    }

    let windows = slots
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            s.into_iter().map(|c| chosen[c]).collect()
        })
        .collect();
    WindowAssignment { windows, totals }
}

/// Consecutive chunks of `chosen`, for comparison with [`balance`].
pub fn chunk_in_order(lengths: &[usize], chosen: &[usize], b: usize) -> WindowAssignment {
    let per = chosen.len() / b;
    let windows: Vec<Vec<usize>> = chosen.chunks(per.max(1)).take(b).map(<[usize]>::to_vec).collect();
    let totals = windows.iter().map(|w| w.iter().map(|&i| lengths[i]).sum()).collect();
    WindowAssignment { windows, totals }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    ExactMatch,
    F1,
}

/// Prompt format for one task. `{x}` in `input_template` takes the example
/// input, `{y}` in `output_template` takes the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub input_template: String,
    pub output_template: String,
    #[serde(default = "default_separator")]
    pub example_separator: String,
    #[serde(default)]
    pub label_names: Option<Vec<String>>,
    #[serde(default)]
    pub metric: Metric,
}

fn default_separator() -> String {
    "\n".into()
}

/// One input/output pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub output: String,
}

impl Example {
    pub fn new(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
        }
    }
}

fn placeholders(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    out.push(name);
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

impl TaskTemplate {
    pub fn new(input_template: impl Into<String>, output_template: impl Into<String>) -> Result<Self> {
        let t = Self {
            input_template: input_template.into(),
            output_template: output_template.into(),
            example_separator: default_separator(),
            label_names: None,
            metric: Metric::Accuracy,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field: &str, s: &str, want: &str| -> Result<()> {
            let found = placeholders(s);
            if let Some(bad) = found.iter().find(|p| **p != want) {
                return Err(Error::Template(format!("unresolved placeholder {{{bad}}} in {field}")));
            }
            if found.len() != 1 {
                return Err(Error::Template(format!(
                    "{field} must contain {{{want}}} exactly once, found {} times",
                    found.len()
                )));
            }
            Ok(())
        };
        check("input_template", &self.input_template, "x")?;
        check("output_template", &self.output_template, "y")?;
        if self.example_separator.is_empty() {
            return Err(Error::Template("example_separator must not be empty".into()));
        }
        Ok(())
    }

    /// Output template split around `{y}`: (prompt prefix with trailing
    /// whitespace removed, that whitespace, text after `{y}`).
    fn output_parts(&self) -> (&str, &str, &str) {
        let (pre, post) = self
            .output_template
            .split_once("{y}")
            .expect("validated template contains {y}");
        let trimmed = pre.trim_end();
        (trimmed, &pre[trimmed.len()..], post)
    }

    pub fn render_example(&self, example: &Example) -> String {
        format!(
            "{}{}",
            self.input_template.replace("{x}", &example.input),
            self.output_template.replace("{y}", &example.output)
        )
    }

    /// The test input with the output field left open for the model.
    pub fn render_query(&self, input: &str) -> String {
        format!("{}{}", self.input_template.replace("{x}", input), self.output_parts().0)
    }

    /// Text the model is expected to produce for `label`, e.g. `" positive"`.
    pub fn completion(&self, label: &str) -> String {
        let (_, ws, post) = self.output_parts();
        format!("{ws}{label}{post}")
    }
}

/// Window texts for a packed assignment, plus the task text that follows
/// them. Windows are separator-joined example renderings; the task text is
/// the separator followed by the open query.
pub fn render_windows(
    assignment: &WindowAssignment,
    examples: &[Example],
    template: &TaskTemplate,
    test_input: &str,
) -> Result<(Vec<String>, String)> {
    let mut windows = Vec::with_capacity(assignment.windows.len());
    for (w, idx) in assignment.windows.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Template(format!("window {w} has no examples")));
        }
        let parts = idx
            .iter()
            .map(|&i| {
                examples
                    .get(i)
                    .map(|e| template.render_example(e))
                    .ok_or_else(|| Error::Packing(format!("example index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        windows.push(parts.join(&template.example_separator));
    }
    Ok((windows, task_text(template, test_input)))
}

pub fn task_text(template: &TaskTemplate, test_input: &str) -> String {
    format!("{}{}", template.example_separator, template.render_query(test_input))
}

/// Document-mode windows: the shared few-shot prefix (replicated in every
/// window), then the window's documents, each fenced by `==` lines.
pub fn render_document_windows(
    prefix: &[Example],
    documents: &[Vec<String>],
    template: &TaskTemplate,
    question: &str,
) -> Result<(Vec<String>, String)> {
    let shared: Vec<String> = prefix.iter().map(|e| template.render_example(e)).collect();
    let shared = shared.join(&template.example_separator);
    let mut windows = Vec::with_capacity(documents.len());
    for (w, docs) in documents.iter().enumerate() {
        if docs.is_empty() && shared.is_empty() {
            return Err(Error::Template(format!(
                "window {w} has neither examples nor documents"
            )));
        }
        let mut text = shared.clone();
        for doc in docs {
            if !text.is_empty() {
                text.push('\n');
            }
            text.push_str("==\n");
            text.push_str(doc);
        }
        if !docs.is_empty() {
            text.push_str("\n==");
        }
        windows.push(text);
    }
    Ok((windows, task_text(template, question)))
}

/// Errors if any window plus the task (and shared BOS) overruns `capacity`.
pub fn check_fit(window_tokens: &[usize], task_tokens: usize, capacity: usize, bos: bool) -> Result<()> {
    for (w, &n) in window_tokens.iter().enumerate() {
        let needed = n + task_tokens + usize::from(bos);
        if needed > capacity {
            return Err(Error::Capacity(format!(
                "window {w} renders to {n} tokens; with the {task_tokens}-token task that is {needed} > capacity {capacity}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_train_lengths() {
        let train = vec![10; 200];
        let test: Vec<usize> = (1..=20).chain(std::iter::repeat_n(20, 80)).collect();
        let b = compute_n_max(&train, &test, 100).unwrap();
        assert_eq!(b.t_max, 20);
        assert_eq!(b.d_90, 10);
        assert_eq!(b.n_max, 8);
        assert_eq!(b.trimmed_train, 2);
        assert_eq!(b.trimmed_test, 1);
    }

    #[test]
    fn capacity_equal_to_longest_test() {
        let b = compute_n_max(&[5, 5], &[30], 30).unwrap();
        assert_eq!(b.n_max, 0);
        assert!(matches!(compute_n_max(&[5], &[31], 30), Err(Error::Budget(_))));
        assert!(compute_n_max(&[], &[1], 30).is_err());
        assert!(compute_n_max(&[0, 0], &[1], 30).is_err());
    }

    #[test]
    fn ramp_of_train_lengths() {
        // drop 100 → 1..=99 remain; rank ceil(0.9·99) = 90 → D_90 = 90
        let train: Vec<usize> = (1..=100).collect();
        let test = vec![24; 10];
        let b = compute_n_max(&train, &test, 1024).unwrap();
        assert_eq!(b.d_90, 90);
        assert_eq!(b.n_max, 1000 / 90);
    }

    #[test]
    fn trimming_keeps_one() {
        assert_eq!(trim_longest(&[7]), vec![0]);
        assert_eq!(trim_longest(&[3, 9, 1]), vec![0, 2]);
        assert_eq!(nearest_rank(&[1, 2, 3, 4], 50), Some(2));
        assert_eq!(nearest_rank(&[], 50), None);
    }

    #[test]
    fn equal_lengths_need_no_swaps() {
        let a = pack(&[4; 12], 3, 4, 1).unwrap();
        assert_eq!(a.spread(), 0);
        assert!(a.windows.iter().all(|w| w.len() == 4));
    }

    #[test]
    fn worked_balance() {
        let a = balance(&[9, 7, 2, 1], &[0, 1, 2, 3], 2);
        let mut totals = a.totals.clone();
        totals.sort_unstable();
        assert_eq!(totals, vec![9, 10]);
        assert_eq!(a.spread(), 1);
        let mut sets: Vec<Vec<usize>> = a.windows.clone();
        sets.sort();
        assert_eq!(sets, vec![vec![0, 3], vec![1, 2]]);
    }

    #[test]
    fn single_window() {
        let lengths = [5, 1, 8, 3, 2];
        let a = pack(&lengths, 1, 3, 4).unwrap();
        assert_eq!(a.windows.len(), 1);
        assert_eq!(a.windows[0].len(), 3);
        assert_eq!(a.spread(), 0);
    }

    #[test]
    fn packing_errors() {
        assert!(matches!(pack(&[1, 2, 3], 2, 2, 0), Err(Error::Packing(_))));
        assert!(pack(&[1, 2, 3], 0, 1, 0).is_err());
        assert!(pack(&[1, 2, 3], 1, 0, 0).is_err());
    }

    #[test]
    fn pack_is_seeded() {
        let lengths: Vec<usize> = (0..50).map(|i| (i * 37) % 23 + 1).collect();
        assert_eq!(pack(&lengths, 3, 5, 11).unwrap(), pack(&lengths, 3, 5, 11).unwrap());
        assert_ne!(pack(&lengths, 3, 5, 11).unwrap(), pack(&lengths, 3, 5, 12).unwrap());
    }

    fn sst2() -> TaskTemplate {
        TaskTemplate::new("Review: {x}\n", "Sentiment: {y}").unwrap()
    }

    #[test]
    fn renders_examples() {
        let t = sst2();
        assert_eq!(
            t.render_example(&Example::new("good", "positive")),
            "Review: good\nSentiment: positive"
        );
        assert_eq!(t.render_query("meh"), "Review: meh\nSentiment:");
        assert_eq!(t.completion("negative"), " negative");
    }

    #[test]
    fn renders_windows_and_task() {
        let examples = vec![
            Example::new("a", "positive"),
            Example::new("b", "negative"),
            Example::new("c", "positive"),
        ];
        let assignment = WindowAssignment {
            windows: vec![vec![0, 2], vec![1]],
            totals: vec![0, 0],
        };
        let (w, task) = render_windows(&assignment, &examples, &sst2(), "d").unwrap();
        assert_eq!(w[0], "Review: a\nSentiment: positive\nReview: c\nSentiment: positive");
        assert_eq!(w[1], "Review: b\nSentiment: negative");
        assert_eq!(task, "\nReview: d\nSentiment:");

        let empty = WindowAssignment {
            windows: vec![vec![0], vec![]],
            totals: vec![0, 0],
        };
        assert!(matches!(
            render_windows(&empty, &examples, &sst2(), "d"),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn template_placeholders_are_checked() {
        assert!(TaskTemplate::new("Review: {x} {z}", "{y}").is_err());
        assert!(TaskTemplate::new("Review:", "{y}").is_err());
        assert!(TaskTemplate::new("{x}", "Answer:").is_err());
        assert!(TaskTemplate::new("{x}{x}", "{y}").is_err());
        assert!(TaskTemplate::new("json {\"a\": 1} {x}", "{y}").is_ok());
        let t: TaskTemplate =
            serde_json::from_str(r#"{"input_template":"Q: {x}\n","output_template":"A: {y}","metric":"exact_match"}"#)
                .unwrap();
        assert_eq!(t.metric, Metric::ExactMatch);
        assert_eq!(t.example_separator, "\n");
    }

    #[test]
    fn document_windows() {
        let t = TaskTemplate::new("Question: {x}\n", "Answer: {y}").unwrap();
        let prefix = vec![Example::new("who?", "Maggie")];
        let docs = vec![vec![
            "Title: A\nEvidence: a".to_string(),
            "Title: B\nEvidence: b".to_string(),
        ]];
        let (w, task) = render_document_windows(&prefix, &docs, &t, "where?").unwrap();
        assert_eq!(
            w[0],
            "Question: who?\nAnswer: Maggie\n==\nTitle: A\nEvidence: a\n==\nTitle: B\nEvidence: b\n=="
        );
        assert_eq!(task, "\nQuestion: where?\nAnswer:");
        let (w, _) = render_document_windows(&[], &[vec!["d".into()]], &t, "q").unwrap();
        assert_eq!(w[0], "==\nd\n==");
        assert!(render_document_windows(&[], &[vec![]], &t, "q").is_err());
    }

    #[test]
    fn fit_check() {
        assert!(check_fit(&[10, 12], 4, 16, false).is_ok());
        assert!(matches!(check_fit(&[10, 12], 4, 16, true), Err(Error::Capacity(_))));
    }
}
