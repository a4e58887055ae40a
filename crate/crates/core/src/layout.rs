//! Geometry of a parallel-context pass: which position id each token gets and
//! which keys each query may attend to.
//!
//! Tokens are flattened as `[BOS] window_1 .. window_B task`. Positions are
//! 0-based. With a shared BOS the BOS sits at position 0 and every window
//! starts at position 1; otherwise windows start at 0. Windows of unequal
//! length are left-aligned (all start at the same position, no padding) and
//! the task tokens continue right after the longest window.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};

/// Validated description of a parallel-context pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    window_lengths: Vec<usize>,
    task_length: usize,
    capacity: usize,
    has_shared_bos: bool,
}

/// What a flattened token is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Bos,
    /// Window index and 0-based offset inside the window.
    Window {
        window: usize,
        offset: usize,
    },
    /// 0-based offset inside the task span.
    Task {
        offset: usize,
    },
}

impl WindowLayout {
    pub fn new(window_lengths: Vec<usize>, task_length: usize, capacity: usize, has_shared_bos: bool) -> Result<Self> {
        if window_lengths.is_empty() {
            return Err(Error::Layout("at least one context window is required".into()));
        }
        if let Some(b) = window_lengths.iter().position(|&c| c == 0) {
            return Err(Error::Layout(format!("window {b} is empty")));
        }
        if task_length == 0 {
            return Err(Error::Layout("task length must be at least 1".into()));
        }
        let longest = *window_lengths.iter().max().expect("non-empty");
        let needed = longest + task_length + usize::from(has_shared_bos);
        if needed > capacity {
            return Err(Error::Capacity(format!(
                "longest window ({longest}) + task ({task_length}){} = {needed} exceeds capacity {capacity}",
                if has_shared_bos { " + BOS (1)" } else { "" }
            )));
        }
        Ok(Self {
            window_lengths,
            task_length,
            capacity,
            has_shared_bos,
        })
    }

    pub fn window_lengths(&self) -> &[usize] {
        &self.window_lengths
    }

    pub fn num_windows(&self) -> usize {
        self.window_lengths.len()
    }

    pub fn task_length(&self) -> usize {
        self.task_length
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn has_shared_bos(&self) -> bool {
        self.has_shared_bos
    }

    fn bos(&self) -> usize {
        usize::from(self.has_shared_bos)
    }

    /// Per-window context budget `N - T - bos`.
    pub fn context_capacity(&self) -> usize {
        self.capacity - self.task_length - self.bos()
    }

    pub fn longest_window(&self) -> usize {
        *self.window_lengths.iter().max().expect("validated non-empty")
    }

    pub fn context_tokens(&self) -> usize {
        self.window_lengths.iter().sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.bos() + self.context_tokens() + self.task_length
    }

    /// Position of the first token of every window.
    pub fn window_start_position(&self) -> usize {
        self.bos()
    }

    /// Position of the first task token.
    pub fn task_start_position(&self) -> usize {
        self.bos() + self.longest_window()
    }

    /// Flattened index range of window `b`.
    pub fn window_range(&self, b: usize) -> Range<usize> {
        let start = self.bos() + self.window_lengths[..b].iter().sum::<usize>();
        start..start + self.window_lengths[b]
    }

    pub fn task_range(&self) -> Range<usize> {
        let start = self.bos() + self.context_tokens();
        start..start + self.task_length
    }

    pub fn roles(&self) -> Vec<TokenRole> {
        let mut roles = Vec::with_capacity(self.total_tokens());
        if self.has_shared_bos {
            roles.push(TokenRole::Bos);
        }
        for (window, &len) in self.window_lengths.iter().enumerate() {
            roles.extend((0..len).map(|offset| TokenRole::Window { window, offset }));
        }
        roles.extend((0..self.task_length).map(|offset| TokenRole::Task { offset }));
        roles
    }

    /// Same layout with window order permuted: window `i` of the result is
    /// window `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.num_windows()];
        if order.len() != seen.len()
            || order
                .iter()
                .any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true))
        {
            return Err(Error::Layout(format!("{order:?} is not a permutation of the windows")));
        }
        Self::new(
            order.iter().map(|&i| self.window_lengths[i]).collect(),
            self.task_length,
            self.capacity,
            self.has_shared_bos,
        )
    }
}

/// Position id for every flattened token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionAssignment {
    positions: Vec<usize>,
}

impl PositionAssignment {
    pub fn as_slice(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.positions
    }

    /// Sequential positions `0..n`, as used by a plain causal pass.
    pub fn sequential(n: usize) -> Self {
        Self {
            positions: (0..n).collect(),
        }
    }
}

impl From<Vec<usize>> for PositionAssignment {
    fn from(positions: Vec<usize>) -> Self {
        Self { positions }
    }
}

pub fn assign_positions(layout: &WindowLayout) -> PositionAssignment {
    let p0 = layout.window_start_position();
    let task0 = layout.task_start_position();
    let positions = layout
        .roles()
        .into_iter()
        .map(|role| match role {
            TokenRole::Bos => 0,
            TokenRole::Window { offset, .. } => p0 + offset,
            TokenRole::Task { offset } => task0 + offset,
        })
        .collect();
    PositionAssignment { positions }
}

/// Square boolean attention mask, row = query, column = key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCausalMask {
    size: usize,
    allowed: Vec<bool>,
}

impl BlockCausalMask {
    /// Plain lower-triangular causal mask.
    pub fn causal(size: usize) -> Self {
        let mut allowed = vec![false; size * size];
        for q in 0..size {
            allowed[q * size..=q * size + q].fill(true);
        }
        Self { size, allowed }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for q in 0..size {
            allowed.extend((0..size).map(|k| f(q, k)));
        }
        Self { size, allowed }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.size..(query + 1) * self.size]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

pub fn build_mask(layout: &WindowLayout) -> BlockCausalMask {
    let roles = layout.roles();
    BlockCausalMask::from_fn(roles.len(), |q, k| {
        use TokenRole::*;
        match (roles[q], roles[k]) {
            (Bos, Bos) => true,
            (Bos, _) => false,
            (_, Bos) => true,
            (Window { window: wq, offset: oq }, Window { window: wk, offset: ok }) => wq == wk && ok <= oq,
            (Window { .. }, Task { .. }) => false,
            (Task { .. }, Window { .. }) => true,
            (Task { offset: oq }, Task { offset: ok }) => ok <= oq,
        }
    })
}

/// Number of `true` cells in [`build_mask`], in closed form.
///
/// Windows contribute `c(c+1)/2` each, task queries see every context token
/// plus a causal triangle among themselves, and a shared BOS adds its own
/// self-attention plus one key for every other query.
pub fn allowed_pair_count(layout: &WindowLayout) -> usize {
    let t = layout.task_length();
    let context = layout.context_tokens();
    let windows: usize = layout.window_lengths().iter().map(|c| c * (c + 1) / 2).sum();
    let bos = if layout.has_shared_bos() { 1 + context + t } else { 0 };
    windows + t * context + t * (t + 1) / 2 + bos
}

/// Text dump: a table of token index, role and position id, a blank line,
/// then the mask as space-separated 0/1 rows (one per query).
pub fn render_dump(layout: &WindowLayout) -> String {
    let positions = assign_positions(layout);
    let mask = build_mask(layout);
    let mut out = String::new();
    out.push_str("index\tsegment\toffset\tposition\n");
    for (i, (role, pos)) in layout.roles().iter().zip(positions.as_slice()).enumerate() {
        let (segment, offset) = match *role {
            TokenRole::Bos => ("bos".to_string(), 0),
            TokenRole::Window { window, offset } => (format!("w{}", window + 1), offset),
            TokenRole::Task { offset } => ("task".to_string(), offset),
        };
        let _ = writeln!(out, "{i}\t{segment}\t{offset}\t{pos}");
    }
    out.push('\n');
    for q in 0..mask.size() {
        let row: Vec<&str> = mask.row(q).iter().map(|&a| if a { "1" } else { "0" }).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(w: &[usize], t: usize, n: usize, bos: bool) -> WindowLayout {
        WindowLayout::new(w.to_vec(), t, n, bos).unwrap()
    }

    fn rows(mask: &BlockCausalMask) -> Vec<Vec<u8>> {
        (0..mask.size())
            .map(|q| mask.row(q).iter().map(|&a| a as u8).collect())
            .collect()
    }

    #[test]
    fn make_layout_accepts_valid_configs() {
        assert_eq!(layout(&[4, 4, 4], 2, 16, false).num_windows(), 3);
        assert_eq!(layout(&[4], 2, 6, false).num_windows(), 1);
    }

    #[test]
    fn make_layout_rejects_bad_configs() {
        assert!(matches!(
            WindowLayout::new(vec![10], 8, 16, false),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(WindowLayout::new(vec![], 1, 16, false), Err(Error::Layout(_))));
        assert!(matches!(
            WindowLayout::new(vec![3, 0], 1, 16, false),
            Err(Error::Layout(_))
        ));
        assert!(matches!(
            WindowLayout::new(vec![3], 0, 16, false),
            Err(Error::Layout(_))
        ));
        // BOS takes one slot
        assert!(WindowLayout::new(vec![4], 2, 6, true).is_err());
        assert!(WindowLayout::new(vec![4], 2, 7, true).is_ok());
    }

    #[test]
    fn positions_equal_windows() {
        let p = assign_positions(&layout(&[4, 4, 4], 2, 16, false));
        assert_eq!(p.as_slice(), &[0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn positions_left_indented() {
        let p = assign_positions(&layout(&[3, 5], 2, 16, false));
        assert_eq!(p.as_slice(), &[0, 1, 2, 0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn positions_with_shared_bos() {
        let p = assign_positions(&layout(&[2, 2], 1, 16, true));
        assert_eq!(p.as_slice(), &[0, 1, 2, 1, 2, 3]);
    }

    #[test]
    fn mask_two_windows() {
        let m = build_mask(&layout(&[2, 2], 1, 16, false));
        assert_eq!(
            rows(&m),
            vec![
                vec![1, 0, 0, 0, 0],
                vec![1, 1, 0, 0, 0],
                vec![0, 0, 1, 0, 0],
                vec![0, 0, 1, 1, 0],
                vec![1, 1, 1, 1, 1],
            ]
        );
    }

    #[test]
    fn mask_with_bos() {
        let m = build_mask(&layout(&[1, 1], 1, 16, true));
        assert_eq!(
            rows(&m),
            vec![vec![1, 0, 0, 0], vec![1, 1, 0, 0], vec![1, 0, 1, 0], vec![1, 1, 1, 1]]
        );
    }

    #[test]
    fn single_window_is_causal() {
        for bos in [false, true] {
            let l = layout(&[5], 3, 16, bos);
            assert_eq!(build_mask(&l), BlockCausalMask::causal(l.total_tokens()));
            assert_eq!(assign_positions(&l), PositionAssignment::sequential(l.total_tokens()));
        }
    }

    #[test]
    fn pair_counts() {
        assert_eq!(allowed_pair_count(&layout(&[4, 4, 4], 2, 16, false)), 57);
        assert_eq!(allowed_pair_count(&layout(&[4], 2, 16, false)), 21);
        let c = 6;
        let window_term = |b: usize| allowed_pair_count(&layout(&vec![c; b], 1, 16, false)) - 1 - b * c;
        assert_eq!(window_term(4), 2 * window_term(2));
    }

    #[test]
    fn dump_format() {
        let dump = render_dump(&layout(&[2, 2], 1, 16, false));
        let expected = "index\tsegment\toffset\tposition\n\
            0\tw1\t0\t0\n1\tw1\t1\t1\n2\tw2\t0\t0\n3\tw2\t1\t1\n4\ttask\t0\t2\n\n\
            1 0 0 0 0\n1 1 0 0 0\n0 0 1 0 0\n0 0 1 1 0\n1 1 1 1 1\n";
        assert_eq!(dump, expected);
    }

    #[test]
    fn permuted_layout() {
        let l = layout(&[3, 5, 2], 2, 16, false);
        assert_eq!(l.permuted(&[2, 0, 1]).unwrap().window_lengths(), &[2, 3, 5]);
        assert!(l.permuted(&[0, 0, 1]).is_err());
        assert!(l.permuted(&[0, 1]).is_err());
    }
}
