//! Accuracy broken down by structure category, in the row order of the
//! results table.

use std::fmt;

use crate::data::{AttributeType, ObjectType, RelationType, StructureTriple};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Object(ObjectType),
    Attribute(AttributeType),
    Relation(RelationType),
}

impl Category {
    /// All categories in table order.
    pub const ORDER: [Category; 12] = [
        Category::Object(ObjectType::Line),
        Category::Object(ObjectType::Shape),
        Category::Attribute(AttributeType::Color),
        Category::Attribute(AttributeType::Position),
        Category::Attribute(AttributeType::Type),
        Category::Attribute(AttributeType::Number),
        Category::Attribute(AttributeType::Size),
        Category::Relation(RelationType::And),
        Category::Relation(RelationType::ConsistentUnion),
        Category::Relation(RelationType::Xor),
        Category::Relation(RelationType::Or),
        Category::Relation(RelationType::Progression),
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Object(o) => o.label(),
            Category::Attribute(a) => a.label(),
            Category::Relation(RelationType::And) => "AND",
            Category::Relation(RelationType::Or) => "OR",
            Category::Relation(RelationType::Xor) => "XOR",
            Category::Relation(RelationType::ConsistentUnion) => "cons_union",
            Category::Relation(RelationType::Progression) => "progression",
        }
    }

    fn matches(self, t: &StructureTriple) -> bool {
        match self {
            Category::Object(o) => t.object == o,
            Category::Attribute(a) => t.attribute == a,
            Category::Relation(r) => t.relation == r,
        }
    }
}

/// Correct and total counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    /// Present categories in table order.
    pub categories: Vec<(Category, Tally)>,
    /// Samples governed by exactly one triple; absent when there are none.
    pub all_single: Option<Tally>,
    pub total: Tally,
}

impl CategoryReport {
    /// Tallies one outcome per sample. A sample counts towards every
    /// category named by any of its triples, once per category.
    pub fn from_outcomes(triples: &[&[StructureTriple]], correct: &[bool]) -> Result<Self> {
        if triples.len() != correct.len() {
            return Err(invalid!(
                "{} metadata entries for {} outcomes",
                triples.len(),
                correct.len()
            ));
        }
        let mut tallies = [Tally::default(); 12];
        let mut single = Tally::default();
        let mut total = Tally::default();
        for (ts, &ok) in triples.iter().zip(correct) {
            total.add(ok);
            if ts.len() == 1 {
                single.add(ok);
            }
            for (c, tally) in Category::ORDER.iter().zip(tallies.iter_mut()) {
                if ts.iter().any(|t| c.matches(t)) {
                    tally.add(ok);
                }
            }
        }
        Ok(CategoryReport {
            categories: Category::ORDER
                .iter()
                .copied()
                .zip(tallies)
                .filter(|(_, t)| t.total > 0)
                .collect(),
            all_single: (single.total > 0).then_some(single),
            total,
        })
    }

    pub fn accuracy(&self, category: Category) -> Option<f64> {
        self.categories
            .iter()
            .find(|(c, _)| *c == category)
            .map(|(_, t)| t.accuracy())
    }

    pub fn total_acc(&self) -> f64 {
        self.total.accuracy()
    }

    pub fn total_error(&self) -> f64 {
        1.0 - self.total_acc()
    }

    /// `(label, accuracy)` rows in table order, ending with the summary rows.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = self
            .categories
            .iter()
            .map(|(c, t)| (c.label(), t.accuracy()))
            .collect();
        if let Some(s) = &self.all_single {
            out.push(("All single acc", s.accuracy()));
        }
        out.push(("Total acc", self.total_acc()));
        out.push(("Total error", self.total_error()));
        out
    }
}

impl fmt::Display for CategoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>9} {:>13}", "category", "acc (%)", "correct/n")?;
        let counts = self
            .categories
            .iter()
            .map(|(_, t)| *t)
            .chain(self.all_single)
            .chain([self.total])
            .map(Some)
            .chain([None]);
        for ((label, acc), tally) in self.rows().into_iter().zip(counts) {
            let n = tally.map_or(String::new(), |t| format!("{}/{}", t.correct, t.total));
            writeln!(f, "{label:<16} {:>9.2} {n:>13}", 100.0 * acc)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> StructureTriple {
        s.parse().unwrap()
    }

    #[test]
    fn hand_tallied_four_samples() {
        let a = [t("shape:color:progression")];
        let b = [t("line:position:xor")];
        let c = [t("shape:position:xor"), t("line:number:progression")];
        let d = [t("shape:type:cons_union")];
        let meta: Vec<&[StructureTriple]> = vec![&a, &b, &c, &d];
        let r = CategoryReport::from_outcomes(&meta, &[true, false, true, true]).unwrap();
        assert_eq!(r.accuracy(Category::Object(ObjectType::Line)), Some(0.5));
        assert_eq!(r.accuracy(Category::Object(ObjectType::Shape)), Some(1.0));
        assert_eq!(
            r.accuracy(Category::Attribute(AttributeType::Position)),
            Some(0.5)
        );
        assert_eq!(r.accuracy(Category::Relation(RelationType::Xor)), Some(0.5));
        assert_eq!(
            r.accuracy(Category::Relation(RelationType::Progression)),
            Some(1.0)
        );
        assert_eq!(r.accuracy(Category::Attribute(AttributeType::Size)), None);
        assert_eq!(r.all_single.unwrap().accuracy(), 2.0 / 3.0);
        assert_eq!(r.total_acc(), 0.75);
        assert_eq!(r.total_error(), 0.25);
        let labels: Vec<&str> = r.rows().iter().map(|(l, _)| *l).collect();
        assert_eq!(
            labels,
            [
                "line",
                "shape",
                "color",
                "position",
                "type",
                "number",
                "cons_union",
                "XOR",
                "progression",
                "All single acc",
                "Total acc",
                "Total error"
            ]
        );
    }

    #[test]
    fn missing_metadata_leaves_only_totals() {
        let meta: Vec<&[StructureTriple]> = vec![&[], &[]];
        let r = CategoryReport::from_outcomes(&meta, &[true, false]).unwrap();
        assert!(r.categories.is_empty());
        assert!(r.all_single.is_none());
        assert_eq!(r.rows().len(), 2);
        assert!(CategoryReport::from_outcomes(&meta, &[true]).is_err());
    }

    #[test]
    fn table_text() {
        let a = [t("shape:position:and")];
        let meta: Vec<&[StructureTriple]> = vec![&a];
        let text = CategoryReport::from_outcomes(&meta, &[true])
            .unwrap()
            .to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[4].starts_with("All single acc"));
        assert!(lines[6].starts_with("Total error") && lines[6].contains("0.00"));
    }
}
