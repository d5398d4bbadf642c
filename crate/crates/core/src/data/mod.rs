//! Micro-PGM: a small procedural generator for 3x3 relational matrices.
//!
//! A sample is governed by one or more [`StructureTriple`]s. Rows of the
//! grid are built by [`apply_relation_row`]; the ninth cell is hidden and
//! offered among seven foils that perturb the relation-bearing attribute.

mod external;
mod generator;
mod io;
mod panel;
mod triple;
mod verify;

pub use external::{load_external_record, write_npz, ExternalLayout, NpyArray};
pub use generator::{
    apply_relation_row, combine_sets, generate_dataset, generate_sample, plan_relation, sample_rng,
    sample_structure, Domain, GeneratedSample, RowPlan,
};
pub use io::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION,
};
pub use panel::{
    color_byte, render_panel, render_panel_bytes, Glyph, PanelSpec, Stroke, STROKE_SLOTS,
};
pub use triple::{AttributeType, LegalTable, ObjectType, RelationType, StructureTriple};
pub use verify::{grid_satisfies, satisfying_candidates, Axis};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

pub const CONTEXT_PANELS: usize = 8;
pub const CANDIDATES: usize = 8;
pub const PANELS: usize = CONTEXT_PANELS + CANDIDATES;

/// Smallest slot cell, in pixels, at which every glyph kind and size
/// renders distinctly.
pub const MIN_CELL: usize = 16;

/// Maps a stored byte to `[-1, 1]`.
#[inline]
pub fn byte_to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding to the nearest byte.
#[inline]
pub fn unit_to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Generator settings. Value domains: `grid * grid` position slots,
/// number `1..=slots`, `sizes` size levels, `colors` intensity levels and
/// `types` glyph kinds (at most 5).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub grid: usize,
    pub sizes: usize,
    pub colors: usize,
    pub types: usize,
    pub triples_per_sample: usize,
    pub distractors: bool,
    pub column_wise: bool,
    pub legal: LegalTable,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 32,
            grid: 2,
            sizes: 3,
            colors: 4,
            types: 3,
            triples_per_sample: 1,
            distractors: false,
            column_wise: false,
            legal: LegalTable::default(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn slots(&self) -> usize {
        self.grid * self.grid
    }

    pub fn axis(&self) -> Axis {
        if self.column_wise {
            Axis::Columns
        } else {
            Axis::Rows
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size > u16::MAX as usize {
            return Err(invalid!("image_size {} out of range", self.image_size));
        }
        if !(2..=4).contains(&self.grid) {
            return Err(invalid!("grid side must be 2..=4, got {}", self.grid));
        }
        if self.image_size / self.grid < MIN_CELL {
            return Err(invalid!(
                "image too small for a {}x{} slot grid (cells need {MIN_CELL} px)",
                self.grid,
                self.grid
            ));
        }
        if !(1..=5).contains(&self.types)
            || self.sizes == 0
            || self.colors == 0
            || self.colors > 255
        {
            return Err(invalid!("attribute value counts out of range"));
        }
        if self.triples_per_sample == 0 {
            return Err(invalid!("triples_per_sample must be >= 1"));
        }
        if self.legal.is_empty() {
            return Err(invalid!("no legal structure triples under this config"));
        }
        for t in self.legal.triples() {
            let dom = Domain::for_attribute(self, t.object, t.attribute);
            let needed = match t.relation {
                RelationType::Progression | RelationType::ConsistentUnion => 3,
                _ => 2,
            };
            if dom.size() < needed {
                return Err(invalid!("domain of {t} too small ({} values)", dom.size()));
            }
        }
        Ok(())
    }
}

/// Sixteen panels (eight context cells in row-major order, then eight
/// candidates) stored as bytes, plus the answer index and governing triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_size: usize,
    pub panels: Vec<u8>,
    pub target: usize,
    pub triples: Vec<StructureTriple>,
}

impl SampleRecord {
    pub fn new(
        image_size: usize,
        panels: Vec<u8>,
        target: usize,
        triples: Vec<StructureTriple>,
    ) -> Result<Self> {
        if panels.len() != PANELS * image_size * image_size {
            return Err(shape_err!(
                "{} panel bytes for 16 panels of {image_size}x{image_size}",
                panels.len()
            ));
        }
        if target >= CANDIDATES {
            return Err(invalid!("target {target} outside 0..8"));
        }
        if triples.len() > u8::MAX as usize {
            return Err(invalid!("too many triples"));
        }
        Ok(SampleRecord {
            image_size,
            panels,
            target,
            triples,
        })
    }

    pub fn panel_len(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Panel `i` in `0..16` as bytes.
    pub fn panel(&self, i: usize) -> &[u8] {
        let n = self.panel_len();
        &self.panels[i * n..(i + 1) * n]
    }

    pub fn candidate(&self, k: usize) -> &[u8] {
        self.panel(CONTEXT_PANELS + k)
    }

    pub fn panel_tensor(&self, i: usize) -> Tensor<f32> {
        let s = self.image_size;
        Tensor::new(
            &[1, s, s],
            self.panel(i).iter().map(|&b| byte_to_unit(b)).collect(),
        )
        .expect("panel shape")
    }

    /// Reorders candidates so new candidate `k` is old candidate `perm[k]`.
    pub fn permute_candidates(&self, perm: &[usize]) -> Result<Self> {
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..CANDIDATES).collect::<Vec<_>>() {
            return Err(invalid!("not a permutation of 0..8: {perm:?}"));
        }
        let n = self.panel_len();
        let mut panels = self.panels[..CONTEXT_PANELS * n].to_vec();
        for &src in perm {
            panels.extend_from_slice(self.candidate(src));
        }
        let target = perm
            .iter()
            .position(|&p| p == self.target)
            .expect("permutation");
        SampleRecord::new(self.image_size, panels, target, self.triples.clone())
    }
}

/// 2x2 mean pooling of a `[C, H, W]` tensor.
pub fn downscale(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [c, h, w] = *image.shape() else {
        return Err(shape_err!(
            "downscale expects [C, H, W], got {:?}",
            image.shape()
        ));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("downscale needs even dimensions, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = image.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let a = plane[2 * y * w + 2 * x];
                let b = plane[2 * y * w + 2 * x + 1];
                let cc = plane[(2 * y + 1) * w + 2 * x];
                let d = plane[(2 * y + 1) * w + 2 * x + 1];
                out.push(((a + b) + (cc + d)) * 0.25);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_map_endpoints() {
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(byte_to_unit(0), -1.0);
        for p in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(p)), p);
        }
    }

    #[test]
    fn downscale_examples() {
        let constant = Tensor::full(&[1, 160, 160], 0.3f32);
        let out = downscale(&constant).unwrap();
        assert_eq!(out.shape(), &[1, 80, 80]);
        assert!(out.data().iter().all(|&v| v == 0.3));

        let checker: Vec<f32> = (0..160 * 160)
            .map(|i| {
                if (i / 160 + i % 160) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        let out = downscale(&Tensor::new(&[1, 160, 160], checker).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        assert!(downscale(&Tensor::zeros(&[1, 5, 4])).is_err());
    }

    #[test]
    fn record_validation() {
        let s = 8;
        assert!(SampleRecord::new(s, vec![0; 16 * 64], 3, vec![]).is_ok());
        assert!(SampleRecord::new(s, vec![0; 15 * 64], 3, vec![]).is_err());
        assert!(SampleRecord::new(s, vec![0; 16 * 64], 8, vec![]).is_err());
    }

    #[test]
    fn candidate_permutation_tracks_target() {
        let s = 8;
        let panels: Vec<u8> = (0..16).flat_map(|i| vec![i as u8; 64]).collect();
        let r = SampleRecord::new(s, panels, 2, vec![]).unwrap();
        let perm = [7, 6, 5, 4, 3, 2, 1, 0];
        let p = r.permute_candidates(&perm).unwrap();
        assert_eq!(p.target, 5);
        assert_eq!(p.candidate(0)[0], 15);
        assert!(r.permute_candidates(&[0, 0, 1, 2, 3, 4, 5, 6]).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        GeneratorConfig::default().validate().unwrap();
        let bad = GeneratorConfig {
            sizes: 2,
            ..GeneratorConfig::default()
        };
        assert!(bad.validate().is_err());
        let small = GeneratorConfig {
            image_size: 16,
            ..GeneratorConfig::default()
        };
        assert!(small.validate().is_err());
    }
}
