use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::guest::Datum;
use crate::store::{CallId, EventRecord, SessionId, SnapshotId, Store, StoreError};

/// One recorded invocation of a tracked callable.
#[derive(Debug, Clone, PartialEq)]
pub struct MockEntry {
    pub args: Vec<Datum>,
    pub return_value: Datum,
}

pub enum MockPop {
    Served(MockEntry),
    /// The callable is mocked but its queue is empty.
    Exhausted,
    NotMocked,
}

/// Per-callable FIFO queues of recorded results.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockSet {
    queues: BTreeMap<String, VecDeque<MockEntry>>,
    warnings: Vec<String>,
}

impl MockSet {
    pub fn is_empty(&self) -> bool {
        self.queues.is_empty()
    }

    pub fn is_mocked(&self, callable: &str) -> bool {
        self.queues.contains_key(callable)
    }

    pub fn queue(&self, callable: &str) -> Option<&VecDeque<MockEntry>> {
        self.queues.get(callable)
    }

    pub fn len(&self, callable: &str) -> usize {
        self.queues.get(callable).map_or(0, VecDeque::len)
    }

    pub fn callables(&self) -> impl Iterator<Item = &str> {
        self.queues.keys().map(String::as_str)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Registers `callable` as mocked, appending entries to its queue.
    pub fn extend(&mut self, callable: &str, entries: impl IntoIterator<Item = MockEntry>) {
        self.queues.entry(callable.to_string()).or_default().extend(entries);
    }

    pub fn pop(&mut self, callable: &str) -> MockPop {
        match self.queues.get_mut(callable) {
            None => MockPop::NotMocked,
            Some(q) => q.pop_front().map_or(MockPop::Exhausted, MockPop::Served),
        }
    }
}

/// Which recorded events feed the queues.
#[derive(Debug, Clone, PartialEq)]
pub enum MockScope {
    Call(CallId),
    /// Calls of a session with ordinals in `start..=end`.
    Window { session: SessionId, start: u64, end: u64 },
    /// Events of one call attached to the given snapshots.
    CallFrom { call: CallId, snapshots: BTreeSet<SnapshotId> },
}

/// Collects the recorded events of `selection` within `scope`, ordered by
/// (call ordinal, seq). A selected name with no events in scope gets an
/// empty queue and a warning, so every call to it runs live.
pub fn build_mocks(store: &Store, scope: &MockScope, selection: &BTreeSet<String>) -> Result<MockSet, StoreError> {
    let mut set = MockSet::default();
    if selection.is_empty() {
        return Ok(set);
    }
    let events: Vec<&EventRecord> = match scope {
        MockScope::Call(c) => {
            store.call(*c)?;
            store.call_events(*c)
        }
        MockScope::Window { session, start, end } => {
            store.session(*session)?;
            store
                .session_calls(*session)
                .into_iter()
                .filter(|c| c.ordinal >= *start && c.ordinal <= *end)
                .flat_map(|c| store.call_events(c.id))
                .collect()
        }
        MockScope::CallFrom { call, snapshots } => {
            store.call(*call)?;
            store.call_events(*call).into_iter().filter(|e| e.snapshot.is_some_and(|s| snapshots.contains(&s))).collect()
        }
    };
    for name in selection {
        set.queues.entry(name.clone()).or_default();
    }
    for e in events {
        if let Some(q) = set.queues.get_mut(&e.callable) {
            let args = e.args.iter().map(|a| store.materialize(*a)).collect::<Result<_, _>>()?;
            q.push_back(MockEntry { args, return_value: store.materialize(e.return_value)? });
        }
    }
    for (name, q) in &set.queues {
        if q.is_empty() {
            set.warnings.push(format!("{name} has no recorded events in scope; calls will run live"));
        }
    }
    Ok(set)
}
