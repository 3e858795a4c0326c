use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::WordVocabulary;
use crate::error::Result;

/// Keyword index → word ids seen in captions of training items carrying that keyword.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    pub lists: BTreeMap<usize, BTreeSet<u32>>,
}

impl CooccurrenceTable {
    /// `items` yields each training item's meta keyword set and its encoded captions.
    pub fn build<'a, I, C>(items: I) -> Self
    where
        I: IntoIterator<Item = (&'a BTreeSet<usize>, C)>,
        C: IntoIterator<Item = &'a [u32]>,
    {
        let mut table = Self::default();
        for (meta, captions) in items {
            if meta.is_empty() {
                continue;
            }
            let words: BTreeSet<u32> = captions
                .into_iter()
                .flatten()
                .copied()
                .filter(|&w| w != WordVocabulary::BOS && w != WordVocabulary::PAD)
                .collect();
            for &k in meta {
                table.lists.entry(k).or_default().extend(&words);
            }
        }
        table
    }

    pub fn list(&self, keyword: usize) -> Option<&BTreeSet<u32>> {
        self.lists.get(&keyword)
    }

    /// `b_i = 1` when word `i` is in none of the lists of `meta`. All zeros when `meta` is empty.
    pub fn mask(&self, meta: &BTreeSet<usize>, c_cap: usize) -> Vec<f64> {
        if meta.is_empty() {
            return vec![0.0; c_cap];
        }
        let mut b = vec![1.0; c_cap];
        for k in meta {
            if let Some(list) = self.lists.get(k) {
                for &w in list {
                    if let Some(slot) = b.get_mut(w as usize) {
                        *slot = 0.0;
                    }
                }
            }
        }
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
