use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::normalize_text;

/// Canonical tag → surface variants that should be scored as that tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagTable {
    groups: BTreeMap<String, BTreeSet<String>>,
    lookup: BTreeMap<String, String>,
}

impl Default for TagTable {
    /// The three high-frequency groups: opening, closing and result tags.
    fn default() -> Self {
        let mut t = Self::empty();
        let groups: [(&str, &[&str]); 3] = [
            ("intro", &["intro", "introduction", "opening"]),
            (
                "outro",
                &["outro", "closing", "closure", "conclusion", "ending", "end of video", "video closing"],
            ),
            ("result", &["finished result", "final result", "results"]),
        ];
        for (canonical, variants) in groups {
            for v in variants {
                t.add(canonical, v).expect("built-in table is consistent");
            }
        }
        t
    }
}

impl TagTable {
    pub fn empty() -> Self {
        Self {
            groups: BTreeMap::new(),
            lookup: BTreeMap::new(),
        }
    }

    /// Adds `variant → canonical`, refusing anything that would make the
    /// mapping ambiguous or non-idempotent.
    pub fn add(&mut self, canonical: &str, variant: &str) -> Result<()> {
        let canonical = normalize_text(canonical);
        let variant = normalize_text(variant);
        if canonical.is_empty() || variant.is_empty() {
            return Err(Error::Data("empty tag in table".into()));
        }
        if let Some(existing) = self.lookup.get(&variant) {
            if existing != &canonical {
                return Err(Error::Data(format!(
                    "variant {variant:?} already maps to {existing:?}, not {canonical:?}"
                )));
            }
        }
        if let Some(target) = self.lookup.get(&canonical) {
            if target != &canonical {
                return Err(Error::Data(format!("canonical {canonical:?} is itself a variant of {target:?}")));
            }
        }
        if self.groups.contains_key(&variant) && variant != canonical {
            return Err(Error::Data(format!("variant {variant:?} is already a canonical tag")));
        }
        self.lookup.insert(variant.clone(), canonical.clone());
        self.lookup.entry(canonical.clone()).or_insert_with(|| canonical.clone());
        let group = self.groups.entry(canonical.clone()).or_default();
        group.insert(canonical);
        group.insert(variant);
        Ok(())
    }

    pub fn groups(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.groups
    }

    /// Canonical form of `tag`; unknown tags come back normalized but otherwise unchanged.
    pub fn standardize(&self, tag: &str) -> String {
        let norm = normalize_text(tag);
        self.lookup.get(&norm).cloned().unwrap_or(norm)
    }

    /// Parses `canonical<TAB>variant` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Self::empty();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (c, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("tag table line {}: expected canonical<TAB>variant", i + 1)))?;
            t.add(c, v)
                .map_err(|e| Error::Data(format!("tag table line {}: {e}", i + 1)))?;
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(Error::io(path))?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (c, vs) in &self.groups {
            for v in vs {
                s.push_str(&format!("{c}\t{v}\n"));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standardizes_known_groups() {
        let t = TagTable::default();
        assert_eq!(t.standardize("introduction"), "intro");
        assert_eq!(t.standardize("End of Video"), "outro");
        assert_eq!(t.standardize("final result"), "result");
        assert_eq!(t.standardize("slicing onions"), "slicing onions");
    }

    #[test]
    fn conflicting_variant_is_rejected() {
        let mut t = TagTable::default();
        assert!(t.add("outro", "opening").is_err());
        assert!(t.add("start", "intro").is_err());
    }

    #[test]
    fn file_round_trip() {
        let t = TagTable::default();
        assert_eq!(TagTable::parse(&t.to_file_string()).unwrap(), t);
        assert!(TagTable::parse("intro introduction\n").is_err());
    }

    proptest! {
        #[test]
        fn idempotent(tag in "[a-z ]{0,20}") {
            let t = TagTable::default();
            let once = t.standardize(&tag);
            prop_assert_eq!(t.standardize(&once), once);
        }
    }

    #[test]
    fn idempotent_on_every_variant() {
        let t = TagTable::default();
        for vs in t.groups().values() {
            for v in vs {
                let once = t.standardize(v);
                assert_eq!(t.standardize(&once), once);
            }
        }
    }
}
