use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

/// Ordered list of triples; duplicates are kept.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleSet {
    triples: Vec<Triple>,
}

impl TripleSet {
    pub fn new(triples: Vec<Triple>) -> Result<Self> {
        if let Some(i) = triples
            .iter()
            .position(|t| t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty())
        {
            return Err(Error::EmptyComponent(i + 1));
        }
        Ok(Self { triples })
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Tab-separated `head\trelation\ttail` lines; blank lines are skipped.
pub fn parse_triples(raw: &[u8]) -> Result<TripleSet> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::Decode(e.to_string()))?;
    let mut triples = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::BadArity {
                line: i + 1,
                found: fields.len(),
            });
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(Error::EmptyComponent(i + 1));
        }
        triples.push(Triple::new(fields[0], fields[1], fields[2]));
    }
    Ok(TripleSet { triples })
}
