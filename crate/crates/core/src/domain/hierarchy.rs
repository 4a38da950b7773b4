//! Structural checks over the outcome hierarchy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::model::{OutcomeLevel, OutcomeNode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation")]
pub enum Violation {
    DuplicateId {
        id: String,
    },
    /// A parent that is not exactly one level above its child.
    LevelSkip {
        node: String,
        parent: String,
        from: OutcomeLevel,
        to: OutcomeLevel,
    },
    Cycle {
        path: Vec<String>,
    },
    /// A non-Program node without any parent.
    Orphan {
        node: String,
        level: OutcomeLevel,
    },
    DanglingParent {
        node: String,
        parent: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate id {id}"),
            Violation::LevelSkip { from, to, node, parent } => {
                write!(f, "level skip {from}\u{2192}{to} ({node} -> {parent})")
            }
            Violation::Cycle { path } => write!(f, "cycle {}", path.join(" -> ")),
            Violation::Orphan { node, level } => write!(f, "orphan {level} {node}"),
            Violation::DanglingParent { node, parent } => {
                write!(f, "dangling parent {parent} on {node}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Reports every duplicate id, level skip, cycle, orphan and dangling parent.
/// Violations are listed per node in id order, cycles last.
pub fn validate_hierarchy(nodes: &[OutcomeNode]) -> ValidationReport {
    let mut violations = Vec::new();
    let mut by_id: BTreeMap<&str, &OutcomeNode> = BTreeMap::new();
    for node in nodes {
        if by_id.insert(node.id.as_str(), node).is_some() {
            violations.push(Violation::DuplicateId { id: node.id.clone() });
        }
    }

    for node in by_id.values() {
        if node.parent_ids.is_empty() && node.level != OutcomeLevel::ProgramOutcome {
            violations.push(Violation::Orphan {
                node: node.id.clone(),
                level: node.level,
            });
        }
        for parent_id in &node.parent_ids {
            match by_id.get(parent_id.as_str()) {
                None => violations.push(Violation::DanglingParent {
                    node: node.id.clone(),
                    parent: parent_id.clone(),
                }),
                Some(parent) if node.level.parent_level() != Some(parent.level) => {
                    violations.push(Violation::LevelSkip {
                        node: node.id.clone(),
                        parent: parent.id.clone(),
                        from: node.level,
                        to: parent.level,
                    })
                }
                Some(_) => {}
            }
        }
    }

    violations.extend(find_cycles(&by_id).into_iter().map(|path| Violation::Cycle { path }));
    ValidationReport { violations }
}

#[derive(Clone, Copy, PartialEq)]
enum Mark {
    Fresh,
    OnStack,
    Done,
}

fn find_cycles(by_id: &BTreeMap<&str, &OutcomeNode>) -> Vec<Vec<String>> {
    let mut marks: BTreeMap<&str, Mark> = by_id.keys().map(|k| (*k, Mark::Fresh)).collect();
    let mut found: BTreeSet<Vec<String>> = BTreeSet::new();

    for start in by_id.keys() {
        if marks[start] != Mark::Fresh {
            continue;
        }
        // Iterative DFS: (node, index of next parent to visit).
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        marks.insert(start, Mark::OnStack);
        while let Some((node, next)) = stack.last_mut() {
            let parents = &by_id[*node].parent_ids;
            if *next >= parents.len() {
                marks.insert(node, Mark::Done);
                stack.pop();
                continue;
            }
            let parent = parents[*next].as_str();
            *next += 1;
            let Some((parent, _)) = by_id.get_key_value(parent) else {
                continue;
            };
            match marks[parent] {
                Mark::Fresh => {
                    marks.insert(parent, Mark::OnStack);
                    stack.push((parent, 0));
                }
                Mark::OnStack => {
                    let pos = stack.iter().position(|(n, _)| n == parent).unwrap_or(0);
                    let cycle: Vec<String> = stack[pos..].iter().map(|(n, _)| n.to_string()).collect();
                    found.insert(rotate_to_min(cycle));
                }
                Mark::Done => {}
            }
        }
    }
    found.into_iter().collect()
}

fn rotate_to_min(mut cycle: Vec<String>) -> Vec<String> {
    if let Some(min_pos) = cycle
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cmp(b.1))
        .map(|(i, _)| i)
    {
        cycle.rotate_left(min_pos);
    }
    cycle
}
