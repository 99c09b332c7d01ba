//! Domain types shared by every stage: tasks, samples, routes and the
//! position bookkeeping used by rewards and metrics.
//!
//! Task ids are 1-based within a sample, and so are all route positions.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Length of the per-task feature vector.
pub const D_FEATURE: usize = 8;

/// Largest number of unfinished tasks a sample may carry.
pub const N_MAX: usize = 25;

/// Task id, 1-based within its sample.
pub type TaskId = usize;

/// One unfinished task of a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// Implied by the task's position in [`Sample::tasks`].
    #[serde(skip)]
    pub id: TaskId,
    pub x: f64,
    pub y: f64,
    pub dist_to_worker: f64,
    pub accept_elapsed: f64,
    pub promise_remaining: f64,
    pub aoi_id: u32,
    pub weight: f64,
    pub type_code: u32,
}

impl Task {
    /// Feature vector in the fixed field order (id excluded).
    pub fn features(&self) -> [f64; D_FEATURE] {
        [
            self.x,
            self.y,
            self.dist_to_worker,
            self.accept_elapsed,
            self.promise_remaining,
            self.aoi_id as f64,
            self.weight,
            self.type_code as f64,
        ]
    }
}

/// A worker's unfinished task set at query time plus the observed visit
/// order over the first `m` of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub worker_id: u64,
    pub query_time: f64,
    pub worker_x: f64,
    pub worker_y: f64,
    pub tasks: Vec<Task>,
    pub label: RouteLabel,
}

impl Sample {
    pub fn n(&self) -> usize {
        self.tasks.len()
    }

    pub fn m(&self) -> usize {
        self.label.len()
    }

    /// Re-assigns task ids from positions. Deserialized tasks carry no id.
    pub fn renumber(&mut self) {
        for (i, t) in self.tasks.iter_mut().enumerate() {
            t.id = i + 1;
        }
    }

    pub fn task(&self, id: TaskId) -> Option<&Task> {
        id.checked_sub(1).and_then(|i| self.tasks.get(i))
    }
}

/// A full predicted route: a permutation of `1..=n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoutePermutation(Vec<TaskId>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("route is empty")]
    Empty,
    #[error("task id {0} appears more than once")]
    Duplicate(TaskId),
    #[error("task id {id} outside 1..={n}")]
    OutOfRange { id: TaskId, n: usize },
}

impl RoutePermutation {
    pub fn new(order: Vec<TaskId>) -> Result<Self, RouteError> {
        if order.is_empty() {
            return Err(RouteError::Empty);
        }
        let n = order.len();
        let mut seen = vec![false; n + 1];
        for &id in &order {
            if id == 0 || id > n {
                return Err(RouteError::OutOfRange { id, n });
            }
            if seen[id] {
                return Err(RouteError::Duplicate(id));
            }
            seen[id] = true;
        }
        Ok(Self(order))
    }

    /// The route `1, 2, ..., n`.
    pub fn identity(n: usize) -> Self {
        Self((1..=n).collect())
    }

    pub fn as_slice(&self) -> &[TaskId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<TaskId> {
        self.0
    }
}

impl fmt::Display for RoutePermutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_ids(f, &self.0)
    }
}

/// Observed visit order over the first `m` tasks. Distinct ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouteLabel(Vec<TaskId>);

impl RouteLabel {
    pub fn new(order: Vec<TaskId>) -> Result<Self, RouteError> {
        if order.is_empty() {
            return Err(RouteError::Empty);
        }
        let mut seen = HashSet::with_capacity(order.len());
        for &id in &order {
            if !seen.insert(id) {
                return Err(RouteError::Duplicate(id));
            }
        }
        Ok(Self(order))
    }

    /// Wraps ids without checking; [`validate_sample`] reports problems.
    pub fn new_unchecked(order: Vec<TaskId>) -> Self {
        Self(order)
    }

    pub fn as_slice(&self) -> &[TaskId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: TaskId) -> bool {
        self.0.contains(&id)
    }
}

impl fmt::Display for RouteLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_ids(f, &self.0)
    }
}

fn write_ids(f: &mut fmt::Formatter<'_>, ids: &[TaskId]) -> fmt::Result {
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            f.write_str(" ")?;
        }
        write!(f, "{id}")?;
    }
    Ok(())
}

/// Route constraints applied by the decoder mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Constraint {
    /// A task may be emitted at most once.
    #[default]
    NoDuplication,
}

impl Constraint {
    /// Feasibility mask over task ids `1..=n` given the already-emitted ids.
    /// `true` marks a feasible task.
    pub fn mask(&self, n: usize, emitted: &[TaskId]) -> Vec<bool> {
        match self {
            Constraint::NoDuplication => {
                let mut mask = vec![true; n];
                for &id in emitted {
                    if (1..=n).contains(&id) {
                        mask[id - 1] = false;
                    }
                }
                mask
            }
        }
    }
}

/// 1-based position of `task_id` in `route`, or `None` when absent.
pub fn order_index(route: &[TaskId], task_id: TaskId) -> Option<usize> {
    route.iter().position(|&id| id == task_id).map(|p| p + 1)
}

/// Position lookup table for a route over ids `1..=n`; entry 0 unused.
pub(crate) fn position_table(route: &[TaskId], n: usize) -> Vec<Option<usize>> {
    let mut pos = vec![None; n + 1];
    for (i, &id) in route.iter().enumerate() {
        if id <= n {
            pos[id] = Some(i + 1);
        }
    }
    pos
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateLabelId(TaskId),
    LabelLongerThanTasks { m: usize, n: usize },
    LabelIdNotAmongTasks(TaskId),
    TooManyTasks { n: usize },
    NoTasks,
    EmptyLabel,
    NegativeDistance(TaskId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateLabelId(id) => write!(f, "duplicate label id {id}"),
            Violation::LabelLongerThanTasks { m, n } => {
                write!(f, "label length {m} exceeds task count {n}")
            }
            Violation::LabelIdNotAmongTasks(id) => write!(f, "label id {id} not among tasks"),
            Violation::TooManyTasks { n } => write!(f, "{n} tasks exceeds the maximum of {N_MAX}"),
            Violation::NoTasks => f.write_str("sample has no tasks"),
            Violation::EmptyLabel => f.write_str("label is empty"),
            Violation::NegativeDistance(id) => write!(f, "task {id} has negative dist_to_worker"),
        }
    }
}

/// Collects every violated sample invariant. An empty list means the
/// sample is valid.
pub fn validate_sample(s: &Sample) -> Vec<Violation> {
    let n = s.n();
    let m = s.m();
    let mut out = Vec::new();
    if n == 0 {
        out.push(Violation::NoTasks);
    }
    if n > N_MAX {
        out.push(Violation::TooManyTasks { n });
    }
    if m == 0 {
        out.push(Violation::EmptyLabel);
    }
    if m > n {
        out.push(Violation::LabelLongerThanTasks { m, n });
    }
    let mut seen = HashSet::new();
    for &id in s.label.as_slice() {
        if !seen.insert(id) {
            out.push(Violation::DuplicateLabelId(id));
        }
        if id == 0 || id > n {
            out.push(Violation::LabelIdNotAmongTasks(id));
        }
    }
    for (i, t) in s.tasks.iter().enumerate() {
        if t.dist_to_worker < 0.0 || t.dist_to_worker.is_nan() {
            out.push(Violation::NegativeDistance(i + 1));
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::fixtures::line_sample;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn order_index_examples() {
        assert_eq!(order_index(&[3, 1, 2], 1), Some(2));
        assert_eq!(order_index(&[3, 1, 2], 5), None);
        assert_eq!(order_index(&[1], 1), Some(1));
    }

    #[test]
    fn duplicate_label_is_reported() {
        let s = line_sample(3, vec![1, 1]);
        assert!(validate_sample(&s).contains(&Violation::DuplicateLabelId(1)));
        assert_eq!(Violation::DuplicateLabelId(1).to_string(), "duplicate label id 1");
    }

    #[test]
    fn full_label_is_valid() {
        let s = line_sample(4, vec![2, 4, 1, 3]);
        assert!(validate_sample(&s).is_empty());
    }

    #[test]
    fn foreign_label_id_is_reported() {
        let s = line_sample(3, vec![1, 4]);
        assert_eq!(validate_sample(&s), vec![Violation::LabelIdNotAmongTasks(4)]);
    }

    #[test]
    fn long_label_and_large_n() {
        let mut s = line_sample(2, vec![1, 2]);
        s.label = RouteLabel::new_unchecked(vec![1, 2, 3]);
        let v = validate_sample(&s);
        assert!(v.contains(&Violation::LabelLongerThanTasks { m: 3, n: 2 }));
        let s = line_sample(26, vec![1]);
        assert_eq!(validate_sample(&s), vec![Violation::TooManyTasks { n: 26 }]);
    }

    #[test]
    fn permutation_rejects_bad_routes() {
        assert_eq!(RoutePermutation::new(vec![1, 1]), Err(RouteError::Duplicate(1)));
        assert_eq!(
            RoutePermutation::new(vec![1, 3]),
            Err(RouteError::OutOfRange { id: 3, n: 2 })
        );
        assert_eq!(RoutePermutation::new(vec![]), Err(RouteError::Empty));
        assert_eq!(RoutePermutation::new(vec![2, 3, 1]).unwrap().to_string(), "2 3 1");
    }

    #[test]
    fn no_duplication_mask() {
        let m = Constraint::NoDuplication.mask(4, &[3, 1]);
        assert_eq!(m, vec![false, true, false, true]);
    }

    proptest! {
        #[test]
        fn order_index_inverts_route(route in Just((1..=8usize).collect::<Vec<_>>()).prop_shuffle()) {
            for &t in &route {
                let p = order_index(&route, t).unwrap();
                prop_assert_eq!(route[p - 1], t);
            }
        }
    }
}
