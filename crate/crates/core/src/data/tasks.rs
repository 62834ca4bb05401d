use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

use super::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Permuted,
    Split,
}

/// One continual-learning task: how to derive it from the source data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Task {
    /// `permuted[j] = original[perm[j]]` for every image.
    Permutation(Vec<usize>),
    /// Keep examples of `classes`, relabel `classes[k]` as `k`, train `head`.
    Classes { classes: Vec<usize>, head: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSequence {
    kind: TaskKind,
    tasks: Vec<Task>,
}

impl TaskSequence {
    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, i: usize) -> &Task {
        &self.tasks[i]
    }

    /// Output head used by task `i`.
    pub fn head(&self, i: usize) -> usize {
        match &self.tasks[i] {
            Task::Permutation(_) => 0,
            Task::Classes { head, .. } => *head,
        }
    }

    /// Number of heads the model needs.
    pub fn num_heads(&self) -> usize {
        (0..self.len()).map(|i| self.head(i) + 1).max().unwrap_or(1)
    }

    /// Materializes task `i` from `source`.
    pub fn apply<F: Real>(&self, i: usize, source: &Dataset<F>) -> Result<Dataset<F>> {
        match &self.tasks[i] {
            Task::Permutation(perm) => {
                if perm.len() != source.input_width() {
                    return Err(crate::error::shape_err(
                        "permutation",
                        format!("{} indices for width {}", perm.len(), source.input_width()),
                    ));
                }
                Ok(source.map_images(|src, dst| {
                    for (d, &p) in dst.iter_mut().zip(perm) {
                        *d = src[p];
                    }
                }))
            }
            Task::Classes { classes, .. } => {
                let keep: Vec<usize> = (0..source.len()).filter(|&j| classes.contains(&source.labels()[j])).collect();
                if keep.is_empty() {
                    return Err(Error::Empty(format!("no examples of classes {classes:?}")));
                }
                let sub = source.subset(&keep)?;
                let labels = sub
                    .labels()
                    .iter()
                    .map(|y| classes.iter().position(|c| c == y).expect("kept"))
                    .collect();
                Dataset::new(sub.images().clone(), labels, classes.len())
            }
        }
    }
}

/// Task 0 is the identity; the others use independent uniform permutations.
pub fn make_permuted_tasks<R: Rng + ?Sized>(input_width: usize, num_tasks: usize, rng: &mut R) -> Result<TaskSequence> {
    if num_tasks == 0 {
        return Err(Error::Config("need at least one task".into()));
    }
    let tasks = (0..num_tasks)
        .map(|t| {
            let mut perm: Vec<usize> = (0..input_width).collect();
            if t > 0 {
                perm.shuffle(rng);
            }
            Task::Permutation(perm)
        })
        .collect();
    Ok(TaskSequence {
        kind: TaskKind::Permuted,
        tasks,
    })
}

/// One head per class group; groups must be disjoint and non-empty.
pub fn make_split_tasks(class_groups: &[Vec<usize>]) -> Result<TaskSequence> {
    if class_groups.is_empty() {
        return Err(Error::Config("need at least one class group".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for g in class_groups {
        if g.is_empty() {
            return Err(Error::Config("empty class group".into()));
        }
        for &c in g {
            if !seen.insert(c) {
                return Err(Error::Config(format!("class {c} appears in more than one task")));
            }
        }
    }
    Ok(TaskSequence {
        kind: TaskKind::Split,
        tasks: class_groups
            .iter()
            .enumerate()
            .map(|(head, g)| Task::Classes {
                classes: g.clone(),
                head,
            })
            .collect(),
    })
}
