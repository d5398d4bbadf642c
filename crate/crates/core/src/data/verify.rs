//! Symbolic verifier. Re-derives the relations from panel contents without
//! looking at pixels.

use super::panel::PanelSpec;
use super::triple::{RelationType, StructureTriple};

/// Direction along which relations hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Columns,
}

impl Axis {
    fn lines(self) -> [[usize; 3]; 3] {
        match self {
            Axis::Rows => [[0, 1, 2], [3, 4, 5], [6, 7, 8]],
            Axis::Columns => [[0, 3, 6], [1, 4, 7], [2, 5, 8]],
        }
    }
}

fn line_holds(relation: RelationType, v: [i32; 3]) -> bool {
    match relation {
        RelationType::And => v[2] as u32 == v[0] as u32 & v[1] as u32,
        RelationType::Or => v[2] as u32 == v[0] as u32 | v[1] as u32,
        RelationType::Xor => v[2] as u32 == v[0] as u32 ^ v[1] as u32,
        RelationType::Progression => v[1] - v[0] == v[2] - v[1] && v[1] != v[0],
        RelationType::ConsistentUnion => v[0] != v[1] && v[1] != v[2] && v[0] != v[2],
    }
}

/// Whether a complete 3x3 grid satisfies every triple along `axis`.
pub fn grid_satisfies(cells: &[PanelSpec], triples: &[StructureTriple], axis: Axis) -> bool {
    if cells.len() != 9 || triples.is_empty() {
        return false;
    }
    triples.iter().all(|t| {
        let mut rows = Vec::with_capacity(3);
        for line in axis.lines() {
            let mut v = [0i32; 3];
            for (slot, &cell) in v.iter_mut().zip(&line) {
                match cells[cell].attribute_value(t.object, t.attribute) {
                    Some(x) => *slot = x,
                    None => return false,
                }
            }
            if !line_holds(t.relation, v) {
                return false;
            }
            rows.push(v);
        }
        match t.relation {
            RelationType::Progression => {
                let step = rows[0][1] - rows[0][0];
                rows.iter().all(|r| r[1] - r[0] == step)
            }
            RelationType::ConsistentUnion => {
                let sorted = |r: &[i32; 3]| {
                    let mut s = *r;
                    s.sort_unstable();
                    s
                };
                let first = sorted(&rows[0]);
                rows.iter().all(|r| sorted(r) == first)
            }
            _ => true,
        }
    })
}

/// Indices of the candidates that complete `context` into a satisfying grid.
pub fn satisfying_candidates(
    context: &[PanelSpec],
    candidates: &[PanelSpec],
    triples: &[StructureTriple],
    axis: Axis,
) -> Vec<usize> {
    let mut grid: Vec<PanelSpec> = context.to_vec();
    grid.push(PanelSpec::default());
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            grid[8] = (*c).clone();
            grid_satisfies(&grid, triples, axis)
        })
        .map(|(k, _)| k)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AttributeType;
    use crate::data::{Glyph, ObjectType};

    fn with_count(n: u8) -> PanelSpec {
        PanelSpec {
            glyphs: (0..n)
                .map(|slot| Glyph {
                    slot,
                    kind: 0,
                    size: 0,
                    color: 0,
                })
                .collect(),
            strokes: vec![],
        }
    }

    #[test]
    fn number_progression() {
        let t = StructureTriple::raw(
            ObjectType::Shape,
            AttributeType::Number,
            RelationType::Progression,
        );
        let counts = [1, 2, 3, 2, 3, 4, 1, 2];
        let context: Vec<PanelSpec> = counts.iter().map(|&n| with_count(n)).collect();
        let candidates: Vec<PanelSpec> = (1..=4).map(with_count).collect();
        assert_eq!(
            satisfying_candidates(&context, &candidates, &[t], Axis::Rows),
            vec![2]
        );
        assert!(satisfying_candidates(&context, &candidates, &[t], Axis::Columns).is_empty());
    }

    #[test]
    fn mixed_steps_rejected() {
        let t = StructureTriple::raw(
            ObjectType::Shape,
            AttributeType::Number,
            RelationType::Progression,
        );
        let counts = [1, 2, 3, 4, 3, 2, 1, 2, 3];
        let grid: Vec<PanelSpec> = counts.iter().map(|&n| with_count(n)).collect();
        assert!(!grid_satisfies(&grid, &[t], Axis::Rows));
    }

    #[test]
    fn union_needs_the_same_set() {
        let t = StructureTriple::raw(
            ObjectType::Shape,
            AttributeType::Number,
            RelationType::ConsistentUnion,
        );
        let good = [1, 2, 3, 3, 1, 2, 2, 3, 1];
        let grid: Vec<PanelSpec> = good.iter().map(|&n| with_count(n)).collect();
        assert!(grid_satisfies(&grid, &[t], Axis::Rows));
        let bad = [1, 2, 3, 3, 1, 2, 2, 4, 1];
        let grid: Vec<PanelSpec> = bad.iter().map(|&n| with_count(n)).collect();
        assert!(!grid_satisfies(&grid, &[t], Axis::Rows));
    }
}
