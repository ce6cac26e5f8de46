use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use crate::guest::Datum;
use crate::store::CodeVersionId;

use super::ReplayError;

/// Which recorded globals are restored from the trace.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Migration {
    #[default]
    All,
    Only(BTreeSet<String>),
    Except(BTreeSet<String>),
}

impl Migration {
    pub fn migrates(&self, name: &str) -> bool {
        match self {
            Migration::All => true,
            Migration::Only(s) => s.contains(name),
            Migration::Except(s) => !s.contains(name),
        }
    }

    fn names(&self) -> Option<&BTreeSet<String>> {
        match self {
            Migration::All => None,
            Migration::Only(s) | Migration::Except(s) => Some(s),
        }
    }
}

impl FromStr for Migration {
    type Err = String;

    /// `all`, `only:a,b` or `except:a,b`.
    fn from_str(s: &str) -> Result<Migration, String> {
        let names = |rest: &str| -> BTreeSet<String> {
            rest.split(',').map(str::trim).filter(|n| !n.is_empty()).map(str::to_string).collect()
        };
        if s == "all" {
            Ok(Migration::All)
        } else if let Some(rest) = s.strip_prefix("only:") {
            Ok(Migration::Only(names(rest)))
        } else if let Some(rest) = s.strip_prefix("except:") {
            Ok(Migration::Except(names(rest)))
        } else {
            Err(format!("expected all, only:a,b or except:a,b; got {s:?}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CodeSource {
    Text(String),
    Version(CodeVersionId),
}

/// Window, migration, manual values, mocks and code variants of a replay.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayPlan {
    /// Inclusive call-ordinal range.
    pub window: Option<(u64, u64)>,
    pub migrate_globals: Migration,
    pub manual_globals: BTreeMap<String, Datum>,
    pub mocked: BTreeSet<String>,
    pub code_override: BTreeMap<String, CodeSource>,
}

impl ReplayPlan {
    /// Full window, every global migrated, `mocked` served from the trace.
    pub fn faithful(mocked: impl IntoIterator<Item = impl Into<String>>) -> ReplayPlan {
        ReplayPlan { mocked: mocked.into_iter().map(Into::into).collect(), ..ReplayPlan::default() }
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        if let Some((a, b)) = self.window {
            if a > b {
                return Err(ReplayError::Plan(format!("window start {a} is after end {b}")));
            }
        }
        if let Some(names) = self.migrate_globals.names() {
            let clash: Vec<&String> = names.iter().filter(|n| self.manual_globals.contains_key(*n)).collect();
            if !clash.is_empty() {
                return Err(ReplayError::Plan(format!("globals both migrated-listed and set manually: {clash:?}")));
            }
        }
        Ok(())
    }
}
