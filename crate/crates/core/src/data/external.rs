//! Ingestion of full-scale records stored as `.npz` archives.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use super::triple::StructureTriple;
use super::{downscale, unit_to_byte, SampleRecord, PANELS};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Names and sizes of the arrays inside an external record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalLayout {
    pub image_key: String,
    pub target_key: String,
    pub structure_key: String,
    pub panel_size: usize,
}

impl ExternalLayout {
    /// The procedural-matrices layout: `image` holding 16 panels of 160x160
    /// bytes, scalar `target`, optional `relation_structure` strings.
    pub fn pgm() -> Self {
        ExternalLayout {
            image_key: "image".into(),
            target_key: "target".into(),
            structure_key: "relation_structure".into(),
            panel_size: 160,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "pgm" => Ok(Self::pgm()),
            other => Err(invalid!("unknown external layout {other:?}")),
        }
    }
}

/// One array decoded from the `.npy` format.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub descr: String,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl NpyArray {
    pub fn from_u8(shape: &[usize], data: Vec<u8>) -> Self {
        NpyArray {
            descr: "|u1".into(),
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_i64(shape: &[usize], values: &[i64]) -> Self {
        NpyArray {
            descr: "<i8".into(),
            shape: shape.to_vec(),
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    /// Fixed-width byte strings (`|S<n>`).
    pub fn from_strings(shape: &[usize], values: &[&str]) -> Self {
        let width = values.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
        let mut data = Vec::with_capacity(width * values.len());
        for v in values {
            data.extend_from_slice(v.as_bytes());
            data.resize(data.len() + width - v.len(), 0);
        }
        NpyArray {
            descr: format!("|S{width}"),
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match self.descr.as_str() {
            "|u1" | "<u1" | "u1" => Ok(&self.data),
            d => Err(Error::Format(format!("expected uint8 array, found {d}"))),
        }
    }

    /// Integer values of any little-endian integer dtype.
    pub fn as_i64(&self) -> Result<Vec<i64>> {
        let d = self.descr.trim_start_matches(['<', '|', '=']);
        let width: usize = d[1..]
            .parse()
            .map_err(|_| Error::Format(format!("unsupported dtype {}", self.descr)))?;
        let signed = match d.as_bytes().first() {
            Some(b'i') => true,
            Some(b'u') => false,
            _ => {
                return Err(Error::Format(format!(
                    "expected integer array, found {}",
                    self.descr
                )))
            }
        };
        if self.descr.starts_with('>') || ![1, 2, 4, 8].contains(&width) {
            return Err(Error::Format(format!("unsupported dtype {}", self.descr)));
        }
        Ok(self
            .data
            .chunks_exact(width)
            .map(|c| {
                let mut b = [0u8; 8];
                b[..width].copy_from_slice(c);
                if signed && c[width - 1] & 0x80 != 0 {
                    b[width..].fill(0xff);
                }
                i64::from_le_bytes(b)
            })
            .collect())
    }

    /// String values of a `|S<n>` or `<U<n>` array.
    pub fn as_strings(&self) -> Result<Vec<String>> {
        let d = self.descr.trim_start_matches(['<', '|', '=']);
        let (kind, width) = d.split_at(1);
        let width: usize = width
            .parse()
            .map_err(|_| Error::Format(format!("unsupported dtype {}", self.descr)))?;
        match kind {
            "S" => Ok(self
                .data
                .chunks_exact(width.max(1))
                .map(|c| {
                    String::from_utf8_lossy(c)
                        .trim_end_matches('\0')
                        .to_string()
                })
                .collect()),
            "U" => Ok(self
                .data
                .chunks_exact(4 * width.max(1))
                .map(|c| {
                    c.chunks_exact(4)
                        .map(|u| u32::from_le_bytes(u.try_into().expect("4 bytes")))
                        .take_while(|&u| u != 0)
                        .filter_map(char::from_u32)
                        .collect()
                })
                .collect()),
            _ => Err(Error::Format(format!(
                "expected string array, found {}",
                self.descr
            ))),
        }
    }

    pub fn to_npy(&self) -> Vec<u8> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let shape = match dims.len() {
            1 => format!("({},)", dims[0]),
            _ => format!("({})", dims.join(", ")),
        };
        let mut header = format!(
            "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
            self.descr, shape
        );
        let unpadded = 10 + header.len() + 1;
        header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
        header.push('\n');
        let mut out = b"\x93NUMPY\x01\x00".to_vec();
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_npy(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("npy: {m}"));
        if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
            return Err(bad("bad magic"));
        }
        let (hlen, start) = match bytes[6] {
            1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
            2 | 3 if bytes.len() >= 12 => (
                u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize,
                12,
            ),
            _ => return Err(bad("unsupported version")),
        };
        let header = bytes
            .get(start..start + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|_| bad("header not utf-8"))?;
        let field = |key: &str| -> Result<&str> {
            let pat = format!("'{key}':");
            let at = header
                .find(&pat)
                .ok_or_else(|| bad(&format!("missing {key}")))?;
            Ok(header[at + pat.len()..].trim_start())
        };
        let descr = field("descr")?;
        let descr = descr
            .strip_prefix('\'')
            .and_then(|s| s.split('\'').next())
            .ok_or_else(|| bad("bad descr"))?
            .to_string();
        if field("fortran_order")?.starts_with("True") {
            return Err(bad("fortran order not supported"));
        }
        let shape_src = field("shape")?;
        let close = shape_src.find(')').ok_or_else(|| bad("bad shape"))?;
        let shape = shape_src[1..close]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape")))
            .collect::<Result<Vec<_>>>()?;
        let item = item_size(&descr).ok_or_else(|| bad(&format!("unsupported dtype {descr}")))?;
        let n: usize = shape.iter().product();
        let data = bytes
            .get(start + hlen..start + hlen + n * item)
            .ok_or_else(|| bad("truncated data"))?
            .to_vec();
        Ok(NpyArray { descr, shape, data })
    }
}

fn item_size(descr: &str) -> Option<usize> {
    let d = descr.trim_start_matches(['<', '|', '=', '>']);
    let (kind, width) = d.split_at(1);
    let width: usize = width.parse().ok()?;
    match kind {
        "U" => Some(4 * width),
        "i" | "u" | "S" | "f" | "b" => Some(width),
        _ => None,
    }
}

/// Writes named arrays as a deflate-compressed `.npz` archive.
pub fn write_npz(path: impl AsRef<Path>, arrays: &[(&str, NpyArray)]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut zip = zip::ZipWriter::new(file);
    let opts = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Deflated);
    for (name, arr) in arrays {
        zip.start_file(format!("{name}.npy"), opts)
            .map_err(|e| Error::Format(e.to_string()))?;
        zip.write_all(&arr.to_npy())
            .map_err(|e| Error::io(path, e))?;
    }
    zip.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

fn read_npz(path: &Path) -> Result<Vec<(String, NpyArray)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut zip =
        zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(zip.len());
    for i in 0..zip.len() {
        let mut f = zip.by_index(i).map_err(|e| Error::Format(e.to_string()))?;
        let name = f.name().trim_end_matches(".npy").to_string();
        let mut buf = Vec::with_capacity(f.size() as usize);
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        out.push((name, NpyArray::from_npy(&buf)?));
    }
    Ok(out)
}

/// Loads one external record: panels are mapped to `[-1, 1]`, downscaled by
/// 2x2 mean pooling and stored back as bytes.
pub fn load_external_record(
    path: impl AsRef<Path>,
    layout: &ExternalLayout,
) -> Result<SampleRecord> {
    let arrays = read_npz(path.as_ref())?;
    let get = |key: &str| arrays.iter().find(|(n, _)| n == key).map(|(_, a)| a);
    let missing = |key: &str| Error::Format(format!("record has no {key:?} array"));

    let image = get(&layout.image_key).ok_or_else(|| missing(&layout.image_key))?;
    let s = layout.panel_size;
    let pixels = image.as_u8()?;
    if pixels.len() != PANELS * s * s {
        return Err(Error::Format(format!(
            "image holds {} values, expected 16 x {s} x {s}",
            pixels.len()
        )));
    }
    let unit: Vec<f32> = pixels.iter().map(|&p| super::byte_to_unit(p)).collect();
    let small = downscale(&Tensor::new(&[PANELS, s, s], unit)?)?;
    let panels: Vec<u8> = small.data().iter().map(|&v| unit_to_byte(v)).collect();

    let target = get(&layout.target_key)
        .ok_or_else(|| missing(&layout.target_key))?
        .as_i64()?;
    let [target] = target[..] else {
        return Err(Error::Format("target must hold exactly one value".into()));
    };
    if !(0..8).contains(&target) {
        return Err(invalid!("target {target} outside 0..8"));
    }

    let triples = match get(&layout.structure_key) {
        None => Vec::new(),
        Some(a) => {
            let words = a.as_strings()?;
            if words.len() % 3 != 0 {
                return Err(Error::Format(
                    "relation structure is not a list of triples".into(),
                ));
            }
            words
                .chunks(3)
                .map(|w| format!("{}:{}:{}", w[0], w[1], w[2]).parse::<StructureTriple>())
                .collect::<Result<Vec<_>>>()?
        }
    };
    SampleRecord::new(s / 2, panels, target as usize, triples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AttributeType, ObjectType, RelationType};

    fn write(dir: &Path, pixels: Vec<u8>, target: i64, with_structure: bool) -> std::path::PathBuf {
        let p = dir.join("r.npz");
        let mut arrays = vec![
            ("image", NpyArray::from_u8(&[16, 160, 160], pixels)),
            ("target", NpyArray::from_i64(&[], &[target])),
        ];
        if with_structure {
            arrays.push((
                "relation_structure",
                NpyArray::from_strings(&[1, 3], &["shape", "color", "progression"]),
            ));
        }
        write_npz(&p, &arrays).unwrap();
        p
    }

    #[test]
    fn synthetic_record_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..16 * 160 * 160)
            .map(|i| if i % 2 == 0 { 255 } else { 0 })
            .collect();
        let p = write(dir.path(), pixels, 3, true);
        let r = load_external_record(&p, &ExternalLayout::pgm()).unwrap();
        assert_eq!(r.image_size, 80);
        assert_eq!(r.target, 3);
        assert_eq!(
            r.triples,
            vec![StructureTriple::raw(
                ObjectType::Shape,
                AttributeType::Color,
                RelationType::Progression
            )]
        );
        // alternating 255/0 columns average to the midpoint
        assert!(r.panels.iter().all(|&b| b == 128));
    }

    #[test]
    fn endpoints_and_missing_structure() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), vec![255; 16 * 160 * 160], 0, false);
        let r = load_external_record(&p, &ExternalLayout::pgm()).unwrap();
        assert!(r.triples.is_empty());
        assert!(r.panel_tensor(0).data().iter().all(|&v| v == 1.0));
        let p = write(dir.path(), vec![0; 16 * 160 * 160], 0, false);
        let r = load_external_record(&p, &ExternalLayout::pgm()).unwrap();
        assert!(r.panel_tensor(5).data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn invalid_records_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), vec![0; 16 * 160 * 160], 9, false);
        assert!(load_external_record(&p, &ExternalLayout::pgm()).is_err());
        let q = dir.path().join("q.npz");
        write_npz(&q, &[("target", NpyArray::from_i64(&[], &[1]))]).unwrap();
        assert!(load_external_record(&q, &ExternalLayout::pgm()).is_err());
        assert!(ExternalLayout::named("clevr").is_err());
    }

    #[test]
    fn npy_round_trip() {
        let a = NpyArray::from_i64(&[2, 2], &[-1, 2, 3, -4]);
        let b = NpyArray::from_npy(&a.to_npy()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.as_i64().unwrap(), vec![-1, 2, 3, -4]);
        assert_eq!(
            a.to_npy().iter().position(|&c| c == b'\n').unwrap() % 64,
            63
        );
    }
}
