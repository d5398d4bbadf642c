use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::panel::{render_panel_bytes, Glyph, PanelSpec, Stroke, STROKE_SLOTS};
use super::triple::{AttributeType, ObjectType, RelationType, StructureTriple};
use super::{GeneratorConfig, SampleRecord, CANDIDATES};
use crate::error::{invalid, Error, Result};
use crate::par;

const RETRIES: usize = 1000;

/// Value domain of one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Non-empty subsets of `bits` slots, as bit masks.
    Set { bits: u32 },
    /// Integers `lo..=hi`.
    Range { lo: i32, hi: i32 },
}

impl Domain {
    pub fn for_attribute(
        cfg: &GeneratorConfig,
        object: ObjectType,
        attribute: AttributeType,
    ) -> Self {
        let slots = match object {
            ObjectType::Shape => cfg.slots(),
            ObjectType::Line => STROKE_SLOTS,
        } as i32;
        let count = |n: usize| Domain::Range {
            lo: 0,
            hi: n as i32 - 1,
        };
        match attribute {
            AttributeType::Position => Domain::Set { bits: slots as u32 },
            AttributeType::Number => Domain::Range { lo: 1, hi: slots },
            AttributeType::Color => count(cfg.colors),
            AttributeType::Size => count(cfg.sizes),
            AttributeType::Type => count(cfg.types),
        }
    }

    pub fn size(&self) -> usize {
        match *self {
            Domain::Set { bits } => (1usize << bits) - 1,
            Domain::Range { lo, hi } => (hi - lo + 1).max(0) as usize,
        }
    }

    pub fn contains(&self, v: i32) -> bool {
        match *self {
            Domain::Set { bits } => v > 0 && v < (1 << bits),
            Domain::Range { lo, hi } => (lo..=hi).contains(&v),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> i32 {
        match *self {
            Domain::Set { bits } => rng.gen_range(1..(1 << bits)),
            Domain::Range { lo, hi } => rng.gen_range(lo..=hi),
        }
    }
}

/// Per-sample parameters shared by all rows of one relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowPlan {
    SetOp,
    Progression { step: i32 },
    Union { values: [i32; 3] },
}

/// Applies a set relation to two masks.
pub fn combine_sets(relation: RelationType, a: u32, b: u32) -> Result<u32> {
    match relation {
        RelationType::And => Ok(a & b),
        RelationType::Or => Ok(a | b),
        RelationType::Xor => Ok(a ^ b),
        r => Err(invalid!("{r} is not a set relation")),
    }
}

/// Draws the shared parameters of a relation over `domain`.
pub fn plan_relation<R: Rng>(
    relation: RelationType,
    domain: &Domain,
    rng: &mut R,
) -> Result<RowPlan> {
    match (relation, *domain) {
        (r, Domain::Set { bits }) if r.is_set_op() => {
            if bits < 2 {
                return Err(invalid!("set relation needs at least 2 slots"));
            }
            Ok(RowPlan::SetOp)
        }
        (RelationType::Progression, Domain::Range { lo, hi }) => {
            if hi - lo < 2 {
                return Err(invalid!("progression needs at least 3 ordered values"));
            }
            let step = if rng.gen_bool(0.5) { 1 } else { -1 };
            Ok(RowPlan::Progression { step })
        }
        (RelationType::ConsistentUnion, Domain::Range { lo, hi }) => {
            if hi - lo < 2 {
                return Err(invalid!("consistent union needs at least 3 values"));
            }
            let mut all: Vec<i32> = (lo..=hi).collect();
            all.shuffle(rng);
            Ok(RowPlan::Union {
                values: [all[0], all[1], all[2]],
            })
        }
        (r, d) => Err(invalid!("relation {r} does not apply to domain {d:?}")),
    }
}

/// Three attribute values for one row obeying `relation`.
///
/// Set relations draw two distinct non-empty masks whose combination is
/// non-empty. Progressions draw a start value keeping all three values in
/// the domain. Consistent unions emit the planned values in random order.
pub fn apply_relation_row<R: Rng>(
    relation: RelationType,
    domain: &Domain,
    plan: &RowPlan,
    rng: &mut R,
) -> Result<[i32; 3]> {
    match (*plan, *domain) {
        (RowPlan::SetOp, Domain::Set { .. }) => {
            for _ in 0..RETRIES {
                let a = domain.sample(rng);
                let b = domain.sample(rng);
                if a == b {
                    continue;
                }
                let c = combine_sets(relation, a as u32, b as u32)? as i32;
                if c != 0 {
                    return Ok([a, b, c]);
                }
            }
            Err(Error::Generation(
                "set relation row retry budget exhausted".into(),
            ))
        }
        (RowPlan::Progression { step }, Domain::Range { lo, hi }) => {
            let starts: Vec<i32> = (lo..=hi)
                .filter(|&a| (lo..=hi).contains(&(a + 2 * step)))
                .collect();
            let a = *starts
                .choose(rng)
                .ok_or_else(|| invalid!("domain {lo}..={hi} too small for step {step}"))?;
            Ok([a, a + step, a + 2 * step])
        }
        (RowPlan::Union { mut values }, Domain::Range { .. }) => {
            values.shuffle(rng);
            Ok(values)
        }
        (p, d) => Err(invalid!("plan {p:?} does not fit domain {d:?}")),
    }
}

fn compatible(a: &StructureTriple, b: &StructureTriple) -> bool {
    if a.object != b.object {
        return true;
    }
    let layout = |t: &StructureTriple| {
        matches!(t.attribute, AttributeType::Position | AttributeType::Number)
    };
    a.attribute != b.attribute && !(layout(a) && layout(b))
}

/// Draws `cfg.triples_per_sample` mutually compatible legal triples.
pub fn sample_structure<R: Rng>(
    rng: &mut R,
    cfg: &GeneratorConfig,
) -> Result<Vec<StructureTriple>> {
    let legal = cfg.legal.triples();
    if legal.is_empty() {
        return Err(invalid!("no legal structure triples under this config"));
    }
    let mut chosen: Vec<StructureTriple> = Vec::with_capacity(cfg.triples_per_sample);
    while chosen.len() < cfg.triples_per_sample {
        let options: Vec<&StructureTriple> = legal
            .iter()
            .filter(|t| chosen.iter().all(|c| compatible(c, t)))
            .collect();
        let pick = options
            .choose(rng)
            .ok_or_else(|| invalid!("cannot draw {} compatible triples", cfg.triples_per_sample))?;
        chosen.push(**pick);
    }
    Ok(chosen)
}

/// A generated record together with the symbolic panels it was rendered
/// from.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub record: SampleRecord,
    /// Grid cells 0..8 in storage order.
    pub context: Vec<PanelSpec>,
    pub candidates: Vec<PanelSpec>,
}

/// Deterministic per-sample stream derived from `(seed, index)`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Attribute values bound by the sample's triples, per object and cell.
type Bindings = BTreeMap<(ObjectType, AttributeType), [i32; 9]>;

/// Sample-level constants used for attributes no triple governs.
struct Filler<'a> {
    cfg: &'a GeneratorConfig,
    mask: BTreeMap<ObjectType, u32>,
    item: BTreeMap<(ObjectType, AttributeType), u8>,
}

impl<'a> Filler<'a> {
    fn new<R: Rng>(cfg: &'a GeneratorConfig, bindings: &Bindings, rng: &mut R) -> Self {
        let mut f = Filler {
            cfg,
            mask: BTreeMap::new(),
            item: BTreeMap::new(),
        };
        for object in [ObjectType::Shape, ObjectType::Line] {
            let m = f.random_mask(object, f.min_items(object, bindings), rng);
            f.mask.insert(object, m);
            for a in [
                AttributeType::Type,
                AttributeType::Size,
                AttributeType::Color,
            ] {
                let v = f.random_item_value(a, rng);
                f.item.insert((object, a), v);
            }
        }
        f
    }

    fn slots(&self, object: ObjectType) -> u32 {
        match object {
            ObjectType::Shape => self.cfg.slots() as u32,
            ObjectType::Line => STROKE_SLOTS as u32,
        }
    }

    /// Per-item relations need two or more items so foils have room to
    /// differ while keeping the layout.
    fn min_items(&self, object: ObjectType, bindings: &Bindings) -> u32 {
        let per_item = bindings
            .keys()
            .any(|&(o, a)| o == object && a.is_per_item());
        if per_item {
            2
        } else {
            1
        }
    }

    fn random_mask<R: Rng>(&self, object: ObjectType, min_items: u32, rng: &mut R) -> u32 {
        let bits = self.slots(object);
        loop {
            let m = rng.gen_range(1..(1u32 << bits));
            if m.count_ones() >= min_items {
                return m;
            }
        }
    }

    fn mask_with_count<R: Rng>(&self, object: ObjectType, count: u32, rng: &mut R) -> u32 {
        let mut slots: Vec<u32> = (0..self.slots(object)).collect();
        slots.shuffle(rng);
        slots[..count as usize].iter().fold(0, |m, s| m | 1 << s)
    }

    fn random_item_value<R: Rng>(&self, a: AttributeType, rng: &mut R) -> u8 {
        let n = match a {
            AttributeType::Type => self.cfg.types,
            AttributeType::Size => self.cfg.sizes,
            _ => self.cfg.colors,
        };
        rng.gen_range(0..n) as u8
    }

    /// Value of a per-item attribute for a new item.
    fn item_value<R: Rng>(
        &self,
        object: ObjectType,
        a: AttributeType,
        bound: Option<i32>,
        rng: &mut R,
    ) -> u8 {
        match bound {
            Some(v) => v as u8,
            None if self.cfg.distractors => self.random_item_value(a, rng),
            None => self.item[&(object, a)],
        }
    }

    /// Builds the items of `object` for a layout mask, keeping any items of
    /// `keep` that sit in slots of the mask.
    fn fill<R: Rng>(
        &self,
        object: ObjectType,
        mask: u32,
        bound: &BTreeMap<AttributeType, i32>,
        keep: &PanelSpec,
        spec: &mut PanelSpec,
        rng: &mut R,
    ) {
        let b = |a: AttributeType| bound.get(&a).copied();
        match object {
            ObjectType::Shape => {
                spec.glyphs.clear();
                for slot in 0..self.slots(object) as u8 {
                    if mask & (1 << slot) == 0 {
                        continue;
                    }
                    if let Some(g) = keep.glyphs.iter().find(|g| g.slot == slot) {
                        spec.glyphs.push(*g);
                        continue;
                    }
                    spec.glyphs.push(Glyph {
                        slot,
                        kind: self.item_value(
                            object,
                            AttributeType::Type,
                            b(AttributeType::Type),
                            rng,
                        ),
                        size: self.item_value(
                            object,
                            AttributeType::Size,
                            b(AttributeType::Size),
                            rng,
                        ),
                        color: self.item_value(
                            object,
                            AttributeType::Color,
                            b(AttributeType::Color),
                            rng,
                        ),
                    });
                }
            }
            ObjectType::Line => {
                spec.strokes.clear();
                for which in 0..STROKE_SLOTS as u8 {
                    if mask & (1 << which) == 0 {
                        continue;
                    }
                    if let Some(s) = keep.strokes.iter().find(|s| s.which == which) {
                        spec.strokes.push(*s);
                        continue;
                    }
                    spec.strokes.push(Stroke {
                        which,
                        color: self.item_value(
                            object,
                            AttributeType::Color,
                            b(AttributeType::Color),
                            rng,
                        ),
                    });
                }
            }
        }
        spec.sort();
    }

    /// Layout mask for a cell given its bound position or number.
    fn layout<R: Rng>(
        &self,
        object: ObjectType,
        bound: &BTreeMap<AttributeType, i32>,
        min_items: u32,
        rng: &mut R,
    ) -> u32 {
        if let Some(&m) = bound.get(&AttributeType::Position) {
            m as u32
        } else if let Some(&n) = bound.get(&AttributeType::Number) {
            self.mask_with_count(object, n as u32, rng)
        } else if self.cfg.distractors {
            self.random_mask(object, min_items, rng)
        } else {
            self.mask[&object]
        }
    }
}

fn bound_at(bindings: &Bindings, object: ObjectType, cell: usize) -> BTreeMap<AttributeType, i32> {
    bindings
        .iter()
        .filter(|((o, _), _)| *o == object)
        .map(|((_, a), vals)| (*a, vals[cell]))
        .collect()
}

/// Generates one sample: grid built row by row, ninth cell hidden among
/// seven foils, candidates shuffled.
pub fn generate_sample<R: Rng>(rng: &mut R, cfg: &GeneratorConfig) -> Result<GeneratedSample> {
    cfg.validate()?;
    let triples = sample_structure(rng, cfg)?;

    let mut bindings = Bindings::new();
    for t in &triples {
        let domain = Domain::for_attribute(cfg, t.object, t.attribute);
        let plan = plan_relation(t.relation, &domain, rng)?;
        let mut grid = [0i32; 9];
        for row in 0..3 {
            let vals = apply_relation_row(t.relation, &domain, &plan, rng)?;
            grid[row * 3..row * 3 + 3].copy_from_slice(&vals);
        }
        bindings.insert((t.object, t.attribute), grid);
    }

    let filler = Filler::new(cfg, &bindings, rng);
    let governed: HashSet<ObjectType> = triples.iter().map(|t| t.object).collect();
    let mut cells = vec![PanelSpec::default(); 9];
    for object in [ObjectType::Line, ObjectType::Shape] {
        let min_items = filler.min_items(object, &bindings);
        if governed.contains(&object) {
            for (cell, spec) in cells.iter_mut().enumerate() {
                let bound = bound_at(&bindings, object, cell);
                let mask = filler.layout(object, &bound, min_items, rng);
                filler.fill(object, mask, &bound, &PanelSpec::default(), spec, rng);
            }
        } else if cfg.distractors {
            let empty = BTreeMap::new();
            for spec in cells.iter_mut() {
                if rng.gen_bool(0.5) {
                    let mask = filler.random_mask(object, 1, rng);
                    filler.fill(object, mask, &empty, &PanelSpec::default(), spec, rng);
                }
            }
        }
    }
    if cfg.column_wise {
        let t: Vec<PanelSpec> = (0..9).map(|i| cells[(i % 3) * 3 + i / 3].clone()).collect();
        cells = t;
    }

    let answer = cells[8].clone();
    let answer_img = render_panel_bytes(&answer, cfg)?;
    let mut images: Vec<Vec<u8>> = vec![answer_img];
    let mut foils: Vec<PanelSpec> = Vec::with_capacity(CANDIDATES - 1);
    let mut attempts = 0;
    while foils.len() < CANDIDATES - 1 {
        attempts += 1;
        if attempts > RETRIES {
            return Err(Error::Generation(format!(
                "could not build {} distinct foils for {:?}",
                CANDIDATES - 1,
                triples
            )));
        }
        let t = *triples.choose(rng).expect("non-empty");
        let foil = perturb(&answer, &t, &bindings, &filler, cfg, rng);
        if foil.attribute_value(t.object, t.attribute)
            == answer.attribute_value(t.object, t.attribute)
        {
            continue;
        }
        let img = render_panel_bytes(&foil, cfg)?;
        if images.contains(&img) {
            continue;
        }
        images.push(img);
        foils.push(foil);
    }

    let target = rng.gen_range(0..CANDIDATES);
    let mut candidates = foils;
    candidates.insert(target, answer);
    let mut panels = Vec::with_capacity(16 * cfg.image_size * cfg.image_size);
    for spec in cells[..8].iter().chain(&candidates) {
        panels.extend(render_panel_bytes(spec, cfg)?);
    }
    let record = SampleRecord::new(cfg.image_size, panels, target, triples)?;
    cells.truncate(8);
    Ok(GeneratedSample {
        record,
        context: cells,
        candidates,
    })
}

/// Changes the value of `t`'s attribute on a copy of `answer`.
fn perturb<R: Rng>(
    answer: &PanelSpec,
    t: &StructureTriple,
    bindings: &Bindings,
    filler: &Filler<'_>,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> PanelSpec {
    let object = t.object;
    let bound = bound_at(bindings, object, 8);
    let mut foil = answer.clone();
    let min_items = filler.min_items(object, bindings);
    match t.attribute {
        AttributeType::Position => {
            let old = answer.mask(object);
            let mask = loop {
                let m = filler.random_mask(object, min_items, rng);
                if m != old {
                    break m;
                }
            };
            filler.fill(object, mask, &bound, answer, &mut foil, rng);
        }
        AttributeType::Number => {
            let domain = Domain::for_attribute(cfg, object, AttributeType::Number);
            let old = answer.count(object) as i32;
            let n = loop {
                let n = domain.sample(rng);
                if n != old && n as u32 >= min_items {
                    break n;
                }
            };
            let mask = filler.mask_with_count(object, n as u32, rng);
            filler.fill(object, mask, &bound, answer, &mut foil, rng);
        }
        a => {
            let old = answer.attribute_value(object, a);
            let n = answer.count(object);
            let values: Vec<u8> = if rng.gen_bool(0.5) {
                let v = loop {
                    let v = filler.random_item_value(a, rng);
                    if Some(v as i32) != old {
                        break v;
                    }
                };
                vec![v; n]
            } else {
                (0..n).map(|_| filler.random_item_value(a, rng)).collect()
            };
            match object {
                ObjectType::Shape => {
                    for (g, v) in foil.glyphs.iter_mut().zip(values) {
                        match a {
                            AttributeType::Type => g.kind = v,
                            AttributeType::Size => g.size = v,
                            _ => g.color = v,
                        }
                    }
                }
                ObjectType::Line => {
                    for (s, v) in foil.strokes.iter_mut().zip(values) {
                        s.color = v;
                    }
                }
            }
        }
    }
    foil
}

/// Generates `count` samples; sample `i` uses the stream `(cfg.seed, i)`.
pub fn generate_dataset(cfg: &GeneratorConfig, count: usize) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let indices: Vec<u64> = (0..count as u64).collect();
    par::map(&indices, |&i| {
        let mut rng = sample_rng(cfg.seed, i);
        generate_sample(&mut rng, cfg).map(|g| g.record)
    })
    .into_iter()
    .collect()
}
