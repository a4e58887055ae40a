use super::forward::{CacheSegment, Model};
use crate::error::{Error, Result};

/// What a constraint permits as the next generated token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NextTokens {
    Any,
    OneOf(Vec<u32>),
    /// Generation is complete.
    Stop,
}

/// Restricts greedy decoding given the tokens generated so far.
pub trait TokenConstraint {
    fn next_tokens(&self, generated: &[u32]) -> NextTokens;
}

/// Stops after any of the given tokens has been emitted.
#[derive(Debug, Clone)]
pub struct StopAfter(pub Vec<u32>);

impl TokenConstraint for StopAfter {
    fn next_tokens(&self, generated: &[u32]) -> NextTokens {
        match generated.last() {
            Some(t) if self.0.contains(t) => NextTokens::Stop,
            _ => NextTokens::Any,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Largest-logit token among `candidates`; ties go to the lowest id.
pub fn argmax_among(logits: &[f32], candidates: &[u32]) -> Option<u32> {
    let mut best: Option<(u32, f32)> = None;
    for &c in candidates {
        let v = *logits.get(c as usize)?;
        match best {
            Some((b, bv)) if v < bv || (v == bv && c > b) => {}
            _ => best = Some((c, v)),
        }
    }
    best.map(|(c, _)| c)
}

/// Incremental decoder over a fixed set of context segments.
///
/// Each pushed token attends to every context segment and to all task tokens
/// pushed before it, and takes the next position id.
pub struct Session<'a> {
    model: &'a Model,
    context: Vec<&'a CacheSegment>,
    task: CacheSegment,
    next_position: usize,
    last_logits: Vec<f32>,
}

impl<'a> Session<'a> {
    /// Runs the task prompt over `context` and returns a session positioned
    /// after it.
    pub fn start(
        model: &'a Model,
        context: &[&'a CacheSegment],
        prompt: &[u32],
        prompt_positions: &[usize],
    ) -> Result<Self> {
        let (logits, task) = model.decode_step(context, prompt, prompt_positions)?;
        let last = logits.row(logits.rows() - 1).to_vec();
        Ok(Self {
            model,
            context: context.to_vec(),
            task,
            next_position: prompt_positions.last().copied().unwrap_or(0) + 1,
            last_logits: last,
        })
    }

    /// Vocabulary logits predicting the next token.
    pub fn logits(&self) -> &[f32] {
        &self.last_logits
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn push(&mut self, token: u32) -> Result<&[f32]> {
        let capacity = self.model.config().max_positions;
        if self.next_position >= capacity {
            return Err(Error::Generation(format!(
                "position budget exhausted: next position {} but capacity is {capacity}",
                self.next_position
            )));
        }
        let (logits, new) = {
            let mut prefix: Vec<&CacheSegment> = self.context.clone();
            prefix.push(&self.task);
            self.model.decode_step(&prefix, &[token], &[self.next_position])?
        };
        self.task.extend(&new)?;
        self.next_position += 1;
        self.last_logits = logits.row(0).to_vec();
        Ok(&self.last_logits)
    }
}

/// Greedy (temperature 0) continuation of the task prompt.
pub fn greedy_generate(
    model: &Model,
    segments: &[&CacheSegment],
    prompt_task_tokens: &[u32],
    task_positions: &[usize],
    max_new: usize,
    constraint: Option<&dyn TokenConstraint>,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::Generation("max_new must be at least 1".into()));
    }
    let mut session = Session::start(model, segments, prompt_task_tokens, task_positions)?;
    let mut out = Vec::new();
    loop {
        let next = match constraint.map_or(NextTokens::Any, |c| c.next_tokens(&out)) {
            NextTokens::Stop => break,
            NextTokens::Any => argmax(session.logits()).map(|i| i as u32),
            NextTokens::OneOf(ids) => argmax_among(session.logits(), &ids),
        };
        let token = next.ok_or_else(|| Error::Generation("no admissible next token".into()))?;
        out.push(token);
        if out.len() == max_new {
            break;
        }
        if constraint.is_some_and(|c| c.next_tokens(&out) == NextTokens::Stop) {
            break;
        }
        session.push(token)?;
    }
    Ok(out)
}
