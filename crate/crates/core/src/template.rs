use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::Feature;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Still,
    Frame,
}

/// One embedding of a template with its media tags. The tags are kept for
/// bookkeeping; fusion never reads them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub feature: Feature,
    pub media_id: u32,
    pub kind: MediaKind,
}

/// Unordered set of embeddings of one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: u64,
    pub identity: usize,
    pub items: Vec<Item>,
}

impl Template {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn features(&self) -> Vec<Feature> {
        self.items.iter().map(|i| i.feature.clone()).collect()
    }

    /// Same template with items reordered by `perm` (item `i` of the result
    /// is item `perm[i]` of `self`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if perm.len() != self.len() || perm.iter().any(|&p| p >= self.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Parameter("not a permutation".into()));
        }
        Ok(Self { items: perm.iter().map(|&p| self.items[p].clone()).collect(), ..self.clone() })
    }
}

/// A collection of templates sharing one embedding width.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub channels: usize,
    pub templates: Vec<Template>,
}

impl Dataset {
    pub fn identities(&self) -> usize {
        self.templates.iter().map(|t| t.identity + 1).max().unwrap_or(0)
    }

    pub fn template(&self, id: u64) -> Result<&Template> {
        self.templates.iter().find(|t| t.id == id).ok_or_else(|| Error::Index(format!("unknown template id {id}")))
    }

    pub fn item_count(&self) -> usize {
        self.templates.iter().map(Template::len).sum()
    }
}
