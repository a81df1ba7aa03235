//! Migration-related semantic concept hierarchy.
//!
//! Concepts live in five categories and two levels: level-1 concepts are
//! roots, level-2 concepts hang off exactly one level-1 concept of the same
//! category. The tree is loaded from a tab-separated file:
//!
//! ```text
//! id <TAB> label <TAB> category <TAB> level <TAB> parent-or-"-" <TAB> definition <TAB> aug1|aug2|...
//! ```
//!
//! Lines starting with `#` and blank lines are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SHIPPED: &str = include_str!("../data/mrsc_taxonomy.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Economic,
    Social,
    Demographic,
    Environmental,
    Political,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Economic,
        Category::Social,
        Category::Demographic,
        Category::Environmental,
        Category::Political,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Economic => "Economic",
            Category::Social => "Social",
            Category::Demographic => "Demographic",
            Category::Environmental => "Environmental",
            Category::Political => "Political",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unknown category {name:?}")]
    UnknownCategory { line: usize, name: String },
    #[error("line {line}: level must be 1 or 2, got {level:?}")]
    BadLevel { line: usize, level: String },
    #[error("line {line}: level-1 concept {id:?} must not have a parent")]
    RootWithParent { line: usize, id: String },
    #[error("line {line}: dangling parent {parent:?} for {id:?}")]
    DanglingParent {
        line: usize,
        id: String,
        parent: String,
    },
    #[error("line {line}: parent {parent:?} of {id:?} is not a level-1 concept")]
    WrongLevelParent {
        line: usize,
        id: String,
        parent: String,
    },
    #[error("line {line}: category mismatch: {id:?} is {child} but parent {parent:?} is {parent_category}")]
    CategoryMismatch {
        line: usize,
        id: String,
        child: Category,
        parent: String,
        parent_category: Category,
    },
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub label: String,
    pub category: Category,
    pub level: u8,
    pub parent_id: Option<String>,
    pub definition: String,
    pub augmentations: Vec<String>,
}

/// Validated, immutable concept hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTree {
    concepts: BTreeMap<String, Concept>,
    /// File order, kept so serialization reproduces the input layout.
    order: Vec<String>,
    roots_by_category: BTreeMap<Category, Vec<String>>,
}

/// A concept label followed by its descriptive sentences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedQuery {
    pub concept_id: String,
    pub sentences: Vec<String>,
}

impl AugmentedQuery {
    /// The query reduced to the concept label alone.
    pub fn label_only(&self) -> AugmentedQuery {
        AugmentedQuery {
            concept_id: self.concept_id.clone(),
            sentences: self.sentences[..1].to_vec(),
        }
    }
}

/// Lowercases and joins alphanumeric runs with hyphens.
pub fn slugify(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    let mut pending_dash = false;
    for c in label.chars() {
        if c.is_alphanumeric() {
            if pending_dash && !out.is_empty() {
                out.push('-');
            }
            pending_dash = false;
            out.extend(c.to_lowercase());
        } else {
            pending_dash = true;
        }
    }
    out
}

fn parse_line(line_no: usize, line: &str) -> Result<Concept, TaxonomyError> {
    let malformed = |reason: &str| TaxonomyError::Malformed {
        line: line_no,
        reason: reason.to_string(),
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(malformed(&format!("expected 7 tab-separated fields, got {}", fields.len())));
    }
    let id = fields[0].trim();
    let label = fields[1].trim();
    if id.is_empty() || label.is_empty() {
        return Err(malformed("empty id or label"));
    }
    let category = fields[2]
        .parse::<Category>()
        .map_err(|_| TaxonomyError::UnknownCategory {
            line: line_no,
            name: fields[2].to_string(),
        })?;
    let level = match fields[3].trim() {
        "1" => 1,
        "2" => 2,
        other => {
            return Err(TaxonomyError::BadLevel {
                line: line_no,
                level: other.to_string(),
            })
        }
    };
    let parent_id = match fields[4].trim() {
        "-" | "" => None,
        p => Some(p.to_string()),
    };
    let augmentations = if fields[6].trim().is_empty() {
        Vec::new()
    } else {
        let augs: Vec<String> = fields[6].split('|').map(|s| s.trim().to_string()).collect();
        if augs.iter().any(String::is_empty) {
            return Err(malformed("empty augmentation sentence"));
        }
        augs
    };
    Ok(Concept {
        id: id.to_string(),
        label: label.to_string(),
        category,
        level,
        parent_id,
        definition: fields[5].trim().to_string(),
        augmentations,
    })
}

fn parse_records(source: &str) -> Result<Vec<(usize, Concept)>, TaxonomyError> {
    source
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| parse_line(i + 1, l.trim_end_matches('\r')).map(|c| (i + 1, c)))
        .collect()
}

/// Parses and validates a taxonomy file.
pub fn load_taxonomy(source: &str) -> Result<ConceptTree, TaxonomyError> {
    ConceptTree::build(Vec::new(), parse_records(source)?)
}

/// The hierarchy bundled with the crate.
pub fn shipped_taxonomy() -> ConceptTree {
    load_taxonomy(SHIPPED).expect("bundled taxonomy is valid")
}

impl ConceptTree {
    fn build(
        base: Vec<(usize, Concept)>,
        extra: Vec<(usize, Concept)>,
    ) -> Result<ConceptTree, TaxonomyError> {
        let mut concepts = BTreeMap::new();
        let mut lines = HashMap::new();
        let mut order = Vec::new();
        for (line, c) in base.into_iter().chain(extra) {
            if concepts.contains_key(&c.id) {
                return Err(TaxonomyError::DuplicateId { line, id: c.id });
            }
            lines.insert(c.id.clone(), line);
            order.push(c.id.clone());
            concepts.insert(c.id.clone(), c);
        }
        let mut roots_by_category: BTreeMap<Category, Vec<String>> =
            Category::ALL.into_iter().map(|c| (c, Vec::new())).collect();
        for id in &order {
            let c = &concepts[id];
            let line = lines[id];
            match (c.level, &c.parent_id) {
                (1, None) => roots_by_category
                    .get_mut(&c.category)
                    .expect("all categories indexed")
                    .push(id.clone()),
                (1, Some(_)) => {
                    return Err(TaxonomyError::RootWithParent {
                        line,
                        id: id.clone(),
                    })
                }
                (_, None) => {
                    return Err(TaxonomyError::DanglingParent {
                        line,
                        id: id.clone(),
                        parent: String::new(),
                    })
                }
                (_, Some(p)) => {
                    let parent = concepts.get(p).ok_or_else(|| TaxonomyError::DanglingParent {
                        line,
                        id: id.clone(),
                        parent: p.clone(),
                    })?;
                    if parent.level != 1 {
                        return Err(TaxonomyError::WrongLevelParent {
                            line,
                            id: id.clone(),
                            parent: p.clone(),
                        });
                    }
                    if parent.category != c.category {
                        return Err(TaxonomyError::CategoryMismatch {
                            line,
                            id: id.clone(),
                            child: c.category,
                            parent: p.clone(),
                            parent_category: parent.category,
                        });
                    }
                }
            }
        }
        Ok(ConceptTree {
            concepts,
            order,
            roots_by_category,
        })
    }

    /// Adds the concepts of `source` on top of this tree. Extension records
    /// may reference concepts of the base tree as parents.
    pub fn extended(&self, source: &str) -> Result<ConceptTree, TaxonomyError> {
        let base = self
            .order
            .iter()
            .map(|id| (0, self.concepts[id].clone()))
            .collect();
        ConceptTree::build(base, parse_records(source)?)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.concepts.get(id)
    }

    fn require(&self, id: &str) -> Result<&Concept, TaxonomyError> {
        self.get(id)
            .ok_or_else(|| TaxonomyError::UnknownConcept(id.to_string()))
    }

    /// Concepts in file order.
    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.order.iter().map(|id| &self.concepts[id])
    }

    pub fn roots(&self, category: Category) -> &[String] {
        &self.roots_by_category[&category]
    }

    pub fn categories(&self) -> impl Iterator<Item = Category> + '_ {
        self.roots_by_category.keys().copied()
    }

    pub fn level_count(&self, level: u8) -> usize {
        self.concepts.values().filter(|c| c.level == level).count()
    }

    pub fn children<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Concept> + 'a {
        self.concepts()
            .filter(move |c| c.parent_id.as_deref() == Some(id))
    }

    /// Parent chain from the nearest ancestor upwards.
    pub fn ancestors(&self, id: &str) -> Result<Vec<&Concept>, TaxonomyError> {
        let mut out = Vec::new();
        let mut current = self.require(id)?;
        while let Some(p) = &current.parent_id {
            current = self.require(p)?;
            out.push(current);
        }
        Ok(out)
    }

    /// The concept label followed by its augmentation sentences.
    pub fn expand_query(&self, id: &str) -> Result<AugmentedQuery, TaxonomyError> {
        let c = self.require(id)?;
        let sentences = std::iter::once(c.label.clone())
            .chain(c.augmentations.iter().cloned())
            .collect();
        Ok(AugmentedQuery {
            concept_id: c.id.clone(),
            sentences,
        })
    }

    /// Writes the tree back in the taxonomy file format.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for c in self.concepts() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                c.id,
                c.label,
                c.category,
                c.level,
                c.parent_id.as_deref().unwrap_or("-"),
                c.definition,
                c.augmentations.join("|"),
            ));
        }
        out
    }
}
