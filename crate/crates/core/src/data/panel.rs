//! Symbolic panel contents and the rasteriser.

use super::triple::{AttributeType, ObjectType};
use super::GeneratorConfig;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Number of background stroke positions: horizontal, vertical, and the two
/// diagonals.
pub const STROKE_SLOTS: usize = 4;

pub const BACKGROUND: u8 = 0;

/// A shape drawn in one grid slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Glyph {
    pub slot: u8,
    pub kind: u8,
    pub size: u8,
    pub color: u8,
}

/// A background line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stroke {
    pub which: u8,
    pub color: u8,
}

/// Everything drawn on one panel. Items are kept sorted by slot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PanelSpec {
    pub glyphs: Vec<Glyph>,
    pub strokes: Vec<Stroke>,
}

impl PanelSpec {
    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty() && self.strokes.is_empty()
    }

    /// Occupied slots of `object` as a bit mask.
    pub fn mask(&self, object: ObjectType) -> u32 {
        match object {
            ObjectType::Shape => self.glyphs.iter().fold(0, |m, g| m | 1 << g.slot),
            ObjectType::Line => self.strokes.iter().fold(0, |m, s| m | 1 << s.which),
        }
    }

    pub fn count(&self, object: ObjectType) -> usize {
        match object {
            ObjectType::Shape => self.glyphs.len(),
            ObjectType::Line => self.strokes.len(),
        }
    }

    /// Per-item values of a glyph/stroke attribute, in slot order.
    pub fn item_values(&self, object: ObjectType, attribute: AttributeType) -> Vec<u8> {
        match (object, attribute) {
            (ObjectType::Shape, AttributeType::Color) => {
                self.glyphs.iter().map(|g| g.color).collect()
            }
            (ObjectType::Shape, AttributeType::Size) => {
                self.glyphs.iter().map(|g| g.size).collect()
            }
            (ObjectType::Shape, AttributeType::Type) => {
                self.glyphs.iter().map(|g| g.kind).collect()
            }
            (ObjectType::Line, AttributeType::Color) => {
                self.strokes.iter().map(|s| s.color).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Panel-level value of an attribute: the slot mask for position, the
    /// item count for number, and for per-item attributes the common value
    /// of all items (`None` when absent or mixed).
    pub fn attribute_value(&self, object: ObjectType, attribute: AttributeType) -> Option<i32> {
        match attribute {
            AttributeType::Position => Some(self.mask(object) as i32),
            AttributeType::Number => Some(self.count(object) as i32),
            _ => {
                let vals = self.item_values(object, attribute);
                let first = *vals.first()?;
                vals.iter().all(|&v| v == first).then_some(first as i32)
            }
        }
    }

    pub(crate) fn sort(&mut self) {
        self.glyphs.sort_by_key(|g| g.slot);
        self.strokes.sort_by_key(|s| s.which);
    }
}

/// 8-bit intensity of a color level; level 0 is the dimmest non-background
/// value and the last level is white.
pub fn color_byte(level: u8, levels: usize) -> u8 {
    let v = 255.0 * (level as f64 + 1.0) / levels as f64;
    v.round().clamp(1.0, 255.0) as u8
}

/// Rasterises a panel into `S * S` bytes.
pub fn render_panel_bytes(spec: &PanelSpec, cfg: &GeneratorConfig) -> Result<Vec<u8>> {
    let s = cfg.image_size;
    let mut img = vec![BACKGROUND; s * s];
    for st in &spec.strokes {
        if st.which as usize >= STROKE_SLOTS || st.color as usize >= cfg.colors {
            return Err(invalid!("stroke {st:?} outside the configured domain"));
        }
        draw_stroke(&mut img, s, st.which, color_byte(st.color, cfg.colors));
    }
    let mut seen = 0u32;
    for g in &spec.glyphs {
        if g.slot as usize >= cfg.slots()
            || g.kind as usize >= cfg.types
            || g.size as usize >= cfg.sizes
            || g.color as usize >= cfg.colors
        {
            return Err(invalid!("glyph {g:?} outside the configured domain"));
        }
        if seen & (1 << g.slot) != 0 {
            return Err(invalid!("two glyphs in slot {}", g.slot));
        }
        seen |= 1 << g.slot;
        draw_glyph(&mut img, cfg, g);
    }
    Ok(img)
}

/// Rasterises a panel into a `[1, S, S]` tensor with values in `[-1, 1]`.
pub fn render_panel(spec: &PanelSpec, cfg: &GeneratorConfig) -> Result<Tensor<f32>> {
    let bytes = render_panel_bytes(spec, cfg)?;
    let s = cfg.image_size;
    Tensor::new(
        &[1, s, s],
        bytes.iter().map(|&b| super::byte_to_unit(b)).collect(),
    )
}

fn draw_stroke(img: &mut [u8], s: usize, which: u8, value: u8) {
    let mid = s / 2;
    for y in 0..s {
        for x in 0..s {
            let hit = match which {
                0 => y + 1 == mid || y == mid,
                1 => x + 1 == mid || x == mid,
                2 => x == y,
                _ => x + y + 1 == s,
            };
            if hit {
                img[y * s + x] = value;
            }
        }
    }
}

fn draw_glyph(img: &mut [u8], cfg: &GeneratorConfig, g: &Glyph) {
    let s = cfg.image_size;
    let side = cfg.grid;
    let cell = s as f64 / side as f64;
    let (row, col) = (g.slot as usize / side, g.slot as usize % side);
    let cx = (col as f64 + 0.5) * cell;
    let cy = (row as f64 + 0.5) * cell;
    let frac = if cfg.sizes > 1 {
        0.35 + 0.5 * g.size as f64 / (cfg.sizes - 1) as f64
    } else {
        0.6
    };
    let r = 0.5 * cell * frac;
    let value = color_byte(g.color, cfg.colors);
    let x0 = (col as f64 * cell).floor() as usize;
    let y0 = (row as f64 * cell).floor() as usize;
    let x1 = (((col + 1) as f64 * cell).ceil() as usize).min(s);
    let y1 = (((row + 1) as f64 * cell).ceil() as usize).min(s);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match g.kind {
                0 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
                1 => dx * dx + dy * dy <= r * r,
                2 => {
                    // apex up; base at cy + 0.8r
                    let top = cy - r;
                    let bottom = cy + 0.8 * r;
                    let yy = y as f64 + 0.5;
                    yy >= top && yy <= bottom && dx.abs() <= (yy - top) / (bottom - top) * r
                }
                3 => dx.abs() + dy.abs() <= r,
                _ => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= 0.36 * r * r
                }
            };
            if inside {
                img[y * s + x] = value;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig::default()
    }

    /// 4-connected component count over non-background pixels.
    fn components(img: &[u8], s: usize) -> usize {
        let mut seen = vec![false; img.len()];
        let mut count = 0;
        for start in 0..img.len() {
            if img[start] == BACKGROUND || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = (p / s, p % s);
                let mut nb = Vec::new();
                if x > 0 {
                    nb.push(p - 1);
                }
                if x + 1 < s {
                    nb.push(p + 1);
                }
                if y > 0 {
                    nb.push(p - s);
                }
                if y + 1 < s {
                    nb.push(p + s);
                }
                for q in nb {
                    if img[q] != BACKGROUND && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn empty_panel_is_background() {
        let t = render_panel(&PanelSpec::default(), &cfg()).unwrap();
        assert_eq!(t.shape(), &[1, 32, 32]);
        assert!(t.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = PanelSpec {
            glyphs: vec![Glyph {
                slot: 1,
                kind: 2,
                size: 1,
                color: 3,
            }],
            strokes: vec![Stroke { which: 2, color: 0 }],
        };
        let a = render_panel_bytes(&spec, &cfg()).unwrap();
        let b = render_panel_bytes(&spec, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn glyph_count_equals_component_count() {
        for size in [16, 32, 80] {
            let c = GeneratorConfig {
                image_size: size,
                ..cfg()
            };
            for n in 1..=4u8 {
                for kind in 0..3 {
                    for sz in 0..3 {
                        let glyphs = (0..n)
                            .map(|slot| Glyph {
                                slot,
                                kind,
                                size: sz,
                                color: slot % 4,
                            })
                            .collect();
                        let spec = PanelSpec {
                            glyphs,
                            strokes: vec![],
                        };
                        let img = render_panel_bytes(&spec, &c).unwrap();
                        assert_eq!(
                            components(&img, size),
                            n as usize,
                            "S={size} kind={kind} size={sz}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn distinct_attributes_render_distinctly() {
        let c = cfg();
        let mut seen = std::collections::HashSet::new();
        for kind in 0..3 {
            for size in 0..3 {
                for color in 0..4 {
                    let spec = PanelSpec {
                        glyphs: vec![Glyph {
                            slot: 0,
                            kind,
                            size,
                            color,
                        }],
                        strokes: vec![],
                    };
                    assert!(seen.insert(render_panel_bytes(&spec, &c).unwrap()));
                }
            }
        }
    }

    #[test]
    fn out_of_domain_rejected() {
        let spec = PanelSpec {
            glyphs: vec![Glyph {
                slot: 9,
                kind: 0,
                size: 0,
                color: 0,
            }],
            strokes: vec![],
        };
        assert!(render_panel_bytes(&spec, &cfg()).is_err());
        let dup = PanelSpec {
            glyphs: vec![
                Glyph {
                    slot: 0,
                    kind: 0,
                    size: 0,
                    color: 0
                };
                2
            ],
            strokes: vec![],
        };
        assert!(render_panel_bytes(&dup, &cfg()).is_err());
    }

    #[test]
    fn attribute_values() {
        let spec = PanelSpec {
            glyphs: vec![
                Glyph {
                    slot: 0,
                    kind: 1,
                    size: 2,
                    color: 3,
                },
                Glyph {
                    slot: 3,
                    kind: 1,
                    size: 0,
                    color: 3,
                },
            ],
            strokes: vec![],
        };
        use AttributeType::*;
        let o = ObjectType::Shape;
        assert_eq!(spec.attribute_value(o, Position), Some(0b1001));
        assert_eq!(spec.attribute_value(o, Number), Some(2));
        assert_eq!(spec.attribute_value(o, Color), Some(3));
        assert_eq!(spec.attribute_value(o, Type), Some(1));
        assert_eq!(spec.attribute_value(o, Size), None);
        assert_eq!(spec.attribute_value(ObjectType::Line, Color), None);
    }
}
