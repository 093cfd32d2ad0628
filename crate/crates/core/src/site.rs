//! The seven adaptable projection sites of a LLaMA-style block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Q,
    K,
    V,
    O,
    G,
    U,
    D,
}

impl Site {
    pub const ALL: [Site; 7] = [Site::Q, Site::K, Site::V, Site::O, Site::G, Site::U, Site::D];

    pub fn letter(self) -> char {
        match self {
            Site::Q => 'Q',
            Site::K => 'K',
            Site::V => 'V',
            Site::O => 'O',
            Site::G => 'G',
            Site::U => 'U',
            Site::D => 'D',
        }
    }

    pub fn from_letter(c: char) -> Result<Site> {
        match c.to_ascii_uppercase() {
            'Q' => Ok(Site::Q),
            'K' => Ok(Site::K),
            'V' => Ok(Site::V),
            'O' => Ok(Site::O),
            'G' => Ok(Site::G),
            'U' => Ok(Site::U),
            'D' => Ok(Site::D),
            other => Err(Error::Config(format!("unknown target module {other:?}"))),
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.letter().encode_utf8(&mut [0; 4]))
    }
}

/// A set of target sites, written as letters in canonical `QKVOGUD` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TargetSet(u8);

impl TargetSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn all() -> Self {
        Site::ALL.into_iter().collect()
    }

    pub fn contains(self, site: Site) -> bool {
        self.0 & site.bit() != 0
    }

    pub fn insert(&mut self, site: Site) {
        self.0 |= site.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn intersects(self, other: TargetSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn union(self, other: TargetSet) -> TargetSet {
        TargetSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Site> {
        Site::ALL.into_iter().filter(move |s| self.contains(*s))
    }
}

impl FromIterator<Site> for TargetSet {
    fn from_iter<I: IntoIterator<Item = Site>>(iter: I) -> Self {
        let mut t = TargetSet::empty();
        for s in iter {
            t.insert(s);
        }
        t
    }
}

impl FromStr for TargetSet {
    type Err = Error;

    /// Accepts `"QKVUD"`, `"q,k,v"` or `"-"` / `""` for the empty set.
    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .filter(|c| !matches!(c, ',' | ' ' | '-' | '+'))
            .map(Site::from_letter)
            .collect()
    }
}

impl fmt::Display for TargetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "-");
        }
        for s in self.iter() {
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl Serialize for TargetSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TargetSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
