//! Splitting LLM verdicts into accepted labels and human escalations, and the
//! two human channels: a gold-label oracle and a live task queue.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::Verdict;
use crate::corpus::{class_id_ignore_case, ClassId, Dataset, SampleId};

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no human task for sample {0}")]
    UnknownTask(SampleId),
    #[error("task {0} is already resolved")]
    NotPending(SampleId),
    #[error("label {label:?} is not one of {valid:?}")]
    InvalidLabel { label: String, valid: Vec<String> },
    #[error("human queue was aborted")]
    Aborted,
    #[error("timed out waiting for {0} human labels")]
    Timeout(usize),
    #[error("queue journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotationMode {
    #[serde(rename = "human")]
    HumanOnly,
    #[default]
    #[serde(rename = "mixed")]
    Mixed,
}

impl AnnotationMode {
    pub const ALL: [AnnotationMode; 2] = [AnnotationMode::HumanOnly, AnnotationMode::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationMode::HumanOnly => "human",
            AnnotationMode::Mixed => "mixed",
        }
    }
}

impl fmt::Display for AnnotationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnnotationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "human" => Ok(AnnotationMode::HumanOnly),
            "mixed" => Ok(AnnotationMode::Mixed),
            _ => Err(format!("unknown annotation mode {s:?}; valid: human, mixed")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routed {
    pub llm_labeled: Vec<(SampleId, ClassId)>,
    pub escalated: Vec<SampleId>,
}

/// Accepts consistent labels and escalates the rest, keeping input order.
pub fn route<'a>(verdicts: impl IntoIterator<Item = (SampleId, &'a Verdict)>) -> Routed {
    let mut out = Routed::default();
    for (id, v) in verdicts {
        match v {
            Verdict::Consistent(label) => out.llm_labeled.push((id, *label)),
            Verdict::Inconsistent { .. } => out.escalated.push(id),
        }
    }
    out
}

/// A channel that turns sample ids into human labels.
pub trait HumanAnnotator: Send + Sync {
    /// Returns one label per id, in input order. May block.
    fn label(&self, dataset: &Dataset, ids: &[SampleId]) -> Result<Vec<ClassId>, RouterError>;
}

/// Simulated human that answers with the gold label.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldOracle;

impl GoldOracle {
    /// Fails unless every sample of `dataset` carries a gold label.
    pub fn for_dataset(dataset: &Dataset) -> Result<Self, RouterError> {
        let missing = dataset.missing_gold();
        if let Some(first) = missing.first() {
            return Err(RouterError::Config(format!(
                "dataset {:?} has {} samples without gold labels (first: {first}); \
                 the simulated human needs gold labels",
                dataset.name,
                missing.len()
            )));
        }
        Ok(GoldOracle)
    }

    pub fn oracle_label(dataset: &Dataset, id: SampleId) -> Result<ClassId, RouterError> {
        dataset
            .sample(id)
            .gold_label
            .ok_or_else(|| RouterError::Config(format!("sample {id} has no gold label")))
    }
}

impl HumanAnnotator for GoldOracle {
    fn label(&self, dataset: &Dataset, ids: &[SampleId]) -> Result<Vec<ClassId>, RouterError> {
        ids.iter().map(|&id| Self::oracle_label(dataset, id)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanTask {
    pub id: SampleId,
    pub text: String,
    pub class_names: Vec<String>,
    pub created_at: u64,
    pub status: TaskStatus,
    pub resolved_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum JournalEvent {
    Enqueue {
        id: SampleId,
        text: String,
        sequence: u64,
    },
    Resolve {
        id: SampleId,
        label: String,
        sequence: u64,
    },
}

#[derive(Debug, Default)]
struct QueueState {
    tasks: BTreeMap<SampleId, HumanTask>,
    next_seq: u64,
    aborted: bool,
}

/// Shared FIFO of escalated samples awaiting a human decision.
///
/// Resolution is the Pending→Done transition under the queue lock, so each
/// task has exactly one resolver.
#[derive(Debug)]
pub struct HumanQueue {
    class_names: Vec<String>,
    state: Mutex<QueueState>,
    changed: Condvar,
    journal: Option<Mutex<BufWriter<File>>>,
}

impl HumanQueue {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            class_names,
            state: Mutex::new(QueueState::default()),
            changed: Condvar::new(),
            journal: None,
        }
    }

    /// Opens (or creates) a journal at `path`, replaying any events already in it.
    pub fn open(class_names: Vec<String>, path: &Path) -> Result<Self, RouterError> {
        let mut queue = Self::new(class_names);
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut st = queue.state.lock().expect("queue lock poisoned");
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |message: String| RouterError::Journal { line: i + 1, message };
                let event: JournalEvent =
                    serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
                match event {
                    JournalEvent::Enqueue { id, text, sequence } => {
                        st.tasks.entry(id).or_insert_with(|| HumanTask {
                            id,
                            text,
                            class_names: queue.class_names.clone(),
                            created_at: sequence,
                            status: TaskStatus::Pending,
                            resolved_label: None,
                        });
                        st.next_seq = st.next_seq.max(sequence + 1);
                    }
                    JournalEvent::Resolve { id, label, sequence } => {
                        let task = st
                            .tasks
                            .get_mut(&id)
                            .ok_or_else(|| bad(format!("resolve of unknown task {id}")))?;
                        task.status = TaskStatus::Done;
                        task.resolved_label = Some(label);
                        st.next_seq = st.next_seq.max(sequence + 1);
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        queue.journal = Some(Mutex::new(BufWriter::new(file)));
        Ok(queue)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().expect("queue lock poisoned")
    }

    fn log(&self, event: &JournalEvent) -> Result<(), RouterError> {
        if let Some(j) = &self.journal {
            let mut j = j.lock().expect("journal lock poisoned");
            serde_json::to_writer(&mut *j, event).map_err(std::io::Error::from)?;
            j.write_all(b"\n")?;
            j.flush()?;
        }
        Ok(())
    }

    /// Adds tasks for ids not yet in the queue; known ids are left untouched.
    /// Returns the tasks that were created.
    pub fn enqueue(&self, items: &[(SampleId, String)]) -> Result<Vec<HumanTask>, RouterError> {
        let mut st = self.lock();
        let mut created = Vec::new();
        for (id, text) in items {
            if st.tasks.contains_key(id) {
                continue;
            }
            let seq = st.next_seq;
            st.next_seq += 1;
            self.log(&JournalEvent::Enqueue {
                id: *id,
                text: text.clone(),
                sequence: seq,
            })?;
            let task = HumanTask {
                id: *id,
                text: text.clone(),
                class_names: self.class_names.clone(),
                created_at: seq,
                status: TaskStatus::Pending,
                resolved_label: None,
            };
            st.tasks.insert(*id, task.clone());
            created.push(task);
        }
        drop(st);
        self.changed.notify_all();
        Ok(created)
    }

    /// Marks a pending task Done. Labels match class names case-insensitively
    /// and are stored in canonical spelling.
    pub fn resolve(&self, id: SampleId, label: &str) -> Result<HumanTask, RouterError> {
        let mut st = self.lock();
        let task = st.tasks.get(&id).ok_or(RouterError::UnknownTask(id))?;
        let class = class_id_ignore_case(&self.class_names, label.trim()).ok_or_else(|| {
            RouterError::InvalidLabel {
                label: label.to_string(),
                valid: self.class_names.clone(),
            }
        })?;
        if task.status != TaskStatus::Pending {
            return Err(RouterError::NotPending(id));
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        let canonical = self.class_names[class].clone();
        self.log(&JournalEvent::Resolve {
            id,
            label: canonical.clone(),
            sequence: seq,
        })?;
        let task = st.tasks.get_mut(&id).expect("checked above");
        task.status = TaskStatus::Done;
        task.resolved_label = Some(canonical);
        let out = task.clone();
        drop(st);
        self.changed.notify_all();
        Ok(out)
    }

    /// Pending tasks, oldest first.
    pub fn pending(&self) -> Vec<HumanTask> {
        let st = self.lock();
        let mut out: Vec<HumanTask> = st
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Pending)
            .cloned()
            .collect();
        out.sort_by_key(|t| t.created_at);
        out
    }

    pub fn pending_len(&self) -> usize {
        self.lock()
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Pending)
            .count()
    }

    pub fn task(&self, id: SampleId) -> Option<HumanTask> {
        self.lock().tasks.get(&id).cloned()
    }

    /// Wakes every waiter with [`RouterError::Aborted`].
    pub fn abort(&self) {
        self.lock().aborted = true;
        self.changed.notify_all();
    }

    pub fn is_aborted(&self) -> bool {
        self.lock().aborted
    }

    /// Blocks until every id is Done, then returns their labels in input order.
    pub fn wait_resolved(
        &self,
        ids: &[SampleId],
        timeout: Option<Duration>,
    ) -> Result<Vec<ClassId>, RouterError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.lock();
        loop {
            if st.aborted {
                return Err(RouterError::Aborted);
            }
            let mut labels = Vec::with_capacity(ids.len());
            let mut outstanding = 0;
            for id in ids {
                let task = st.tasks.get(id).ok_or(RouterError::UnknownTask(*id))?;
                match &task.resolved_label {
                    Some(l) => labels.push(
                        class_id_ignore_case(&self.class_names, l).ok_or_else(|| {
                            RouterError::InvalidLabel {
                                label: l.clone(),
                                valid: self.class_names.clone(),
                            }
                        })?,
                    ),
                    None => outstanding += 1,
                }
            }
            if outstanding == 0 {
                return Ok(labels);
            }
            st = match deadline {
                None => self.changed.wait(st).expect("queue lock poisoned"),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(RouterError::Timeout(outstanding));
                    }
                    self.changed
                        .wait_timeout(st, d - now)
                        .expect("queue lock poisoned")
                        .0
                }
            };
        }
    }
}

/// Human channel backed by a [`HumanQueue`] that people resolve elsewhere.
#[derive(Debug, Clone)]
pub struct QueueAnnotator {
    queue: Arc<HumanQueue>,
    timeout: Option<Duration>,
}

impl QueueAnnotator {
    pub fn new(queue: Arc<HumanQueue>, timeout: Option<Duration>) -> Self {
        Self { queue, timeout }
    }

    pub fn queue(&self) -> &Arc<HumanQueue> {
        &self.queue
    }
}

impl HumanAnnotator for QueueAnnotator {
    fn label(&self, dataset: &Dataset, ids: &[SampleId]) -> Result<Vec<ClassId>, RouterError> {
        let items: Vec<(SampleId, String)> = ids
            .iter()
            .map(|&id| (id, dataset.sample(id).text.clone()))
            .collect();
        self.queue.enqueue(&items)?;
        self.queue.wait_resolved(ids, self.timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use proptest::prelude::*;

    fn names() -> Vec<String> {
        vec!["Negative".into(), "Positive".into()]
    }

    fn items(ids: &[SampleId]) -> Vec<(SampleId, String)> {
        ids.iter().map(|&i| (i, format!("text {i}"))).collect()
    }

    #[test]
    fn route_splits_by_verdict() {
        let v = [
            Verdict::Consistent(1),
            Verdict::Inconsistent { observed: vec![Some(0), Some(1)] },
            Verdict::Consistent(0),
        ];
        let r = route(v.iter().enumerate());
        assert_eq!(r.llm_labeled, vec![(0, 1), (2, 0)]);
        assert_eq!(r.escalated, vec![1]);

        let all_good = vec![Verdict::Consistent(0); 50];
        let r = route(all_good.iter().enumerate());
        assert_eq!((r.llm_labeled.len(), r.escalated.len()), (50, 0));
    }

    #[test]
    fn mode_names() {
        assert_eq!(serde_json::to_string(&AnnotationMode::HumanOnly).unwrap(), "\"human\"");
        assert_eq!("mixed".parse::<AnnotationMode>().unwrap(), AnnotationMode::Mixed);
        assert!("both".parse::<AnnotationMode>().unwrap_err().contains("human, mixed"));
    }

    #[test]
    fn oracle_requires_gold() {
        let with_gold = Dataset::new(
            "d",
            names(),
            vec![("a".into(), Some(1)), ("b".into(), Some(0))],
            Split::Train,
        )
        .unwrap();
        let oracle = GoldOracle::for_dataset(&with_gold).unwrap();
        assert_eq!(oracle.label(&with_gold, &[1, 0]).unwrap(), vec![0, 1]);

        let without = Dataset::new("d", names(), vec![("a".into(), None)], Split::Train).unwrap();
        assert!(matches!(GoldOracle::for_dataset(&without), Err(RouterError::Config(_))));
    }

    #[test]
    fn queue_state_machine() {
        let q = HumanQueue::new(names());
        q.enqueue(&items(&[5, 3, 9])).unwrap();
        assert_eq!(q.pending().iter().map(|t| t.id).collect::<Vec<_>>(), vec![5, 3, 9]);
        let done = q.resolve(3, "positive").unwrap();
        assert_eq!(done.resolved_label.as_deref(), Some("Positive"));
        assert_eq!(q.pending_len(), 2);
        assert!(matches!(q.resolve(3, "Negative"), Err(RouterError::NotPending(3))));
        assert!(matches!(q.resolve(4, "Negative"), Err(RouterError::UnknownTask(4))));
        match q.resolve(5, "Banana") {
            Err(RouterError::InvalidLabel { valid, .. }) => assert_eq!(valid, names()),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(q.pending_len(), 2);
        // re-enqueueing a known id changes nothing
        assert!(q.enqueue(&items(&[3])).unwrap().is_empty());
        assert_eq!(q.task(3).unwrap().status, TaskStatus::Done);
    }

    #[test]
    fn waiter_released_when_all_resolved() {
        let q = Arc::new(HumanQueue::new(names()));
        q.enqueue(&items(&[1, 2])).unwrap();
        let waiter = {
            let q = Arc::clone(&q);
            std::thread::spawn(move || q.wait_resolved(&[1, 2], None))
        };
        q.resolve(2, "Negative").unwrap();
        std::thread::sleep(Duration::from_millis(20));
        assert!(!waiter.is_finished());
        q.resolve(1, "Positive").unwrap();
        assert_eq!(waiter.join().unwrap().unwrap(), vec![1, 0]);
    }

    #[test]
    fn abort_and_timeout() {
        let q = Arc::new(HumanQueue::new(names()));
        q.enqueue(&items(&[1])).unwrap();
        assert!(matches!(
            q.wait_resolved(&[1], Some(Duration::from_millis(10))),
            Err(RouterError::Timeout(1))
        ));
        let waiter = {
            let q = Arc::clone(&q);
            std::thread::spawn(move || q.wait_resolved(&[1], None))
        };
        q.abort();
        assert!(matches!(waiter.join().unwrap(), Err(RouterError::Aborted)));
    }

    #[test]
    fn journal_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queue.jsonl");
        {
            let q = HumanQueue::open(names(), &path).unwrap();
            q.enqueue(&items(&[7, 8])).unwrap();
            q.resolve(8, "Negative").unwrap();
        }
        let q = HumanQueue::open(names(), &path).unwrap();
        assert_eq!(q.pending().iter().map(|t| t.id).collect::<Vec<_>>(), vec![7]);
        assert_eq!(q.task(8).unwrap().resolved_label.as_deref(), Some("Negative"));
        q.enqueue(&items(&[9])).unwrap();
        assert!(q.task(9).unwrap().created_at > q.task(8).unwrap().created_at);
    }

    proptest! {
        #[test]
        fn route_is_exact_partition(flags in prop::collection::vec(any::<bool>(), 0..60)) {
            let verdicts: Vec<Verdict> = flags.iter().map(|&ok| if ok { Verdict::Consistent(1) } else { Verdict::Inconsistent { observed: vec![] } }).collect();
            let r = route(verdicts.iter().enumerate());
            let mut all: Vec<SampleId> = r.llm_labeled.iter().map(|(i, _)| *i).chain(r.escalated.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..flags.len()).collect::<Vec<_>>());
            prop_assert!(r.escalated.iter().all(|&i| !flags[i]));
        }
    }
}
