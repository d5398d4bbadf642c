use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

macro_rules! code_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident = $code:literal => $label:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant = $code),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn code(self) -> u8 {
                self as u8
            }

            pub fn from_code(code: u8) -> Result<Self> {
                match code {
                    $($code => Ok($name::$variant),)+
                    _ => Err(Error::Format(format!(concat!("bad ", stringify!($name), " code {}"), code))),
                }
            }

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($label $(| $alias)* => Ok($name::$variant),)+
                    other => Err(invalid!(concat!("unknown ", stringify!($name), " {:?}"), other)),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

code_enum!(ObjectType {
    Line = 0 => "line" | "lines",
    Shape = 1 => "shape" | "shapes",
});

code_enum!(AttributeType {
    Color = 0 => "color" | "colour",
    Position = 1 => "position",
    Type = 2 => "type",
    Number = 3 => "number",
    Size = 4 => "size",
});

code_enum!(RelationType {
    And = 0 => "and",
    Or = 1 => "or",
    Xor = 2 => "xor",
    Progression = 3 => "progression",
    ConsistentUnion = 4 => "consistent_union" | "cons_union",
});

impl RelationType {
    pub fn is_set_op(self) -> bool {
        matches!(
            self,
            RelationType::And | RelationType::Or | RelationType::Xor
        )
    }
}

impl AttributeType {
    /// Attributes carried by each glyph or stroke rather than by the layout.
    pub fn is_per_item(self) -> bool {
        matches!(
            self,
            AttributeType::Color | AttributeType::Type | AttributeType::Size
        )
    }
}

/// `(object, attribute, relation)` governing one aspect of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StructureTriple {
    pub object: ObjectType,
    pub attribute: AttributeType,
    pub relation: RelationType,
}

impl StructureTriple {
    /// Builds a triple, rejecting combinations absent from `legal`.
    pub fn new(
        object: ObjectType,
        attribute: AttributeType,
        relation: RelationType,
        legal: &LegalTable,
    ) -> Result<Self> {
        let t = StructureTriple {
            object,
            attribute,
            relation,
        };
        if legal.contains(&t) {
            Ok(t)
        } else {
            Err(invalid!("illegal structure triple {t}"))
        }
    }

    pub const fn raw(object: ObjectType, attribute: AttributeType, relation: RelationType) -> Self {
        StructureTriple {
            object,
            attribute,
            relation,
        }
    }

    pub fn codes(&self) -> [u8; 3] {
        [
            self.object.code(),
            self.attribute.code(),
            self.relation.code(),
        ]
    }

    pub fn from_codes(codes: [u8; 3]) -> Result<Self> {
        Ok(StructureTriple {
            object: ObjectType::from_code(codes[0])?,
            attribute: AttributeType::from_code(codes[1])?,
            relation: RelationType::from_code(codes[2])?,
        })
    }
}

impl fmt::Display for StructureTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.object, self.attribute, self.relation)
    }
}

impl FromStr for StructureTriple {
    type Err = Error;

    /// Parses `object:attribute:relation`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [o, a, r] = parts[..] else {
            return Err(invalid!("expected object:attribute:relation, got {s:?}"));
        };
        Ok(StructureTriple::raw(o.parse()?, a.parse()?, r.parse()?))
    }
}

/// The set of triples the generator may produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegalTable {
    triples: Vec<StructureTriple>,
}

impl Default for LegalTable {
    /// Set relations on position; progression on number, size and color;
    /// consistent union on type, color and number. Lines carry no type or
    /// size.
    fn default() -> Self {
        use AttributeType::*;
        use ObjectType::*;
        use RelationType::*;
        let mut triples = Vec::new();
        for object in [Shape, Line] {
            for rel in [And, Or, Xor] {
                triples.push(StructureTriple::raw(object, Position, rel));
            }
            let prog: &[AttributeType] = match object {
                Shape => &[Number, Size, Color],
                Line => &[Number, Color],
            };
            for &a in prog {
                triples.push(StructureTriple::raw(object, a, Progression));
            }
            let union: &[AttributeType] = match object {
                Shape => &[Type, Color, Number],
                Line => &[Color, Number],
            };
            for &a in union {
                triples.push(StructureTriple::raw(object, a, ConsistentUnion));
            }
        }
        LegalTable::new(triples).expect("default table is generatable")
    }
}

impl LegalTable {
    pub fn new(mut triples: Vec<StructureTriple>) -> Result<Self> {
        triples.sort();
        triples.dedup();
        for t in &triples {
            let ok = match t.relation {
                RelationType::And | RelationType::Or | RelationType::Xor => {
                    t.attribute == AttributeType::Position
                }
                _ => t.attribute != AttributeType::Position,
            };
            let fits_object = t.object == ObjectType::Shape
                || matches!(
                    t.attribute,
                    AttributeType::Position | AttributeType::Number | AttributeType::Color
                );
            if !ok || !fits_object {
                return Err(invalid!("triple {t} cannot be generated"));
            }
        }
        Ok(LegalTable { triples })
    }

    pub fn contains(&self, t: &StructureTriple) -> bool {
        self.triples.contains(t)
    }

    pub fn triples(&self) -> &[StructureTriple] {
        &self.triples
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn restrict_relations(&self, keep: &[RelationType]) -> Self {
        self.filter(|t| keep.contains(&t.relation))
    }

    pub fn restrict_objects(&self, keep: &[ObjectType]) -> Self {
        self.filter(|t| keep.contains(&t.object))
    }

    pub fn restrict_attributes(&self, keep: &[AttributeType]) -> Self {
        self.filter(|t| keep.contains(&t.attribute))
    }

    fn filter(&self, f: impl Fn(&StructureTriple) -> bool) -> Self {
        LegalTable {
            triples: self.triples.iter().copied().filter(|t| f(t)).collect(),
        }
    }
}

impl fmt::Display for LegalTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.triples.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LegalTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let triples = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        LegalTable::new(triples)
    }
}
