//! Independent per-window encoding and the matching joint-pass inputs.

use rayon::prelude::*;

use super::forward::{CacheSegment, Model};
use crate::error::{Error, Result};
use crate::layout::{assign_positions, build_mask, WindowLayout};
use crate::tensor::Matrix;

/// Encoded context windows, ready for task decoding.
#[derive(Debug, Clone)]
pub struct ParallelContext {
    bos: Option<CacheSegment>,
    windows: Vec<CacheSegment>,
    window_lengths: Vec<usize>,
}

impl ParallelContext {
    /// Encodes each window on its own, left-aligned at the first window
    /// position. With a shared BOS, the BOS is encoded once at position 0 and
    /// every window attends to it.
    pub fn encode(model: &Model, windows: &[Vec<u32>], bos: Option<u32>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Layout("at least one context window is required".into()));
        }
        if let Some(b) = windows.iter().position(Vec::is_empty) {
            return Err(Error::Layout(format!("window {b} is empty")));
        }
        let bos = bos.map(|id| model.encode_window(&[id], &[0])).transpose()?;
        let p0 = usize::from(bos.is_some());
        let prefix: Vec<&CacheSegment> = bos.iter().collect();
        let encoded = windows
            .par_iter()
            .map(|w| {
                let positions: Vec<usize> = (p0..p0 + w.len()).collect();
                model.encode_window_after(&prefix, w, &positions)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bos,
            windows: encoded,
            window_lengths: windows.iter().map(Vec::len).collect(),
        })
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn window_lengths(&self) -> &[usize] {
        &self.window_lengths
    }

    pub fn has_shared_bos(&self) -> bool {
        self.bos.is_some()
    }

    /// Segments in canonical order: BOS (if any), then windows as given.
    pub fn segments(&self) -> Vec<&CacheSegment> {
        self.bos.iter().chain(&self.windows).collect()
    }

    /// Segments with the windows reordered; `order[i]` names the window
    /// placed i-th.
    pub fn segments_in_order(&self, order: &[usize]) -> Vec<&CacheSegment> {
        self.bos.iter().chain(order.iter().map(|&i| &self.windows[i])).collect()
    }

    /// First task position: right after the longest window.
    pub fn task_start(&self) -> usize {
        usize::from(self.bos.is_some()) + self.window_lengths.iter().max().copied().unwrap_or(0)
    }

    pub fn task_positions(&self, task_len: usize) -> Vec<usize> {
        let s = self.task_start();
        (s..s + task_len).collect()
    }

    pub fn layout(&self, task_len: usize, capacity: usize) -> Result<WindowLayout> {
        WindowLayout::new(self.window_lengths.clone(), task_len, capacity, self.has_shared_bos())
    }

    /// Task logits `[T, vocab]` with every window visible.
    pub fn decode(&self, model: &Model, task: &[u32]) -> Result<Matrix> {
        self.layout(task.len(), model.config().max_positions)?;
        model.decode_with_caches(&self.segments(), task, &self.task_positions(task.len()))
    }
}

/// Flattened tokens `[BOS] w_1 .. w_B task` with the layout describing them.
pub fn flatten(
    windows: &[Vec<u32>],
    task: &[u32],
    bos: Option<u32>,
    capacity: usize,
) -> Result<(Vec<u32>, WindowLayout)> {
    let layout = WindowLayout::new(
        windows.iter().map(Vec::len).collect(),
        task.len(),
        capacity,
        bos.is_some(),
    )?;
    let mut tokens: Vec<u32> = bos.into_iter().collect();
    for w in windows {
        tokens.extend_from_slice(w);
    }
    tokens.extend_from_slice(task);
    Ok((tokens, layout))
}

/// Task logits from one joint masked pass over the flattened sequence.
pub fn joint_task_logits(model: &Model, windows: &[Vec<u32>], task: &[u32], bos: Option<u32>) -> Result<Matrix> {
    let (tokens, layout) = flatten(windows, task, bos, model.config().max_positions)?;
    let logits = model.forward_full(&tokens, &assign_positions(&layout), &build_mask(&layout))?;
    let rows: Vec<usize> = layout.task_range().collect();
    Ok(logits.select_rows(&rows))
}
