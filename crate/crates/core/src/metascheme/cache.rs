use std::collections::BTreeMap;

use crate::diffcore::GradVector;
use crate::error::Result;
use crate::tasksuite::TaskId;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    mean: GradVector,
    count: u64,
}

/// Per-task running means of past flatness signals. Tasks without an
/// entry contribute nothing. `phase` counts resets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatnessCache {
    entries: BTreeMap<TaskId, Entry>,
    phase: u64,
}

impl FlatnessCache {
    pub fn mean(&self, task: TaskId) -> Option<&GradVector> {
        self.entries.get(&task).map(|e| &e.mean)
    }

    pub fn count(&self, task: TaskId) -> u64 {
        self.entries.get(&task).map_or(0, |e| e.count)
    }

    pub fn phase(&self) -> u64 {
        self.phase
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tasks with at least one recorded signal, ascending.
    pub fn tasks(&self) -> Vec<TaskId> {
        self.entries.keys().copied().collect()
    }

    pub fn update(&mut self, task: TaskId, signal: &GradVector) -> Result<()> {
        match self.entries.get_mut(&task) {
            Some(e) => {
                e.count += 1;
                let k = 1.0 / e.count as f64;
                let mut diff = signal.clone();
                diff.axpy(-1.0, &e.mean)?;
                e.mean.axpy(k, &diff)?;
            }
            None => {
                self.entries.insert(
                    task,
                    Entry {
                        mean: signal.clone(),
                        count: 1,
                    },
                );
            }
        }
        Ok(())
    }

    /// Drops all history and starts a new phase.
    pub fn reset(&mut self) {
        self.entries.clear();
        self.phase += 1;
    }

    /// `(task, count, mean)` in task order.
    pub fn snapshot(&self) -> Vec<(TaskId, u64, &GradVector)> {
        self.entries.iter().map(|(t, e)| (*t, e.count, &e.mean)).collect()
    }

    pub fn from_snapshot(phase: u64, entries: Vec<(TaskId, u64, GradVector)>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|(t, count, mean)| (t, Entry { mean, count }))
                .collect(),
            phase,
        }
    }
}
