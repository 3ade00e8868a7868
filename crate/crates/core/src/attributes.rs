//! Soft-biometric attribute schema, one-hot binary expansion and the
//! pairwise exclusive/common split computed by XOR.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute names and cardinalities shipped by default. Fifteen labels
/// expanding to 88 binary dimensions.
pub const DEFAULT_ATTRIBUTES: [(&str, usize); 15] = [
    ("gender", 2),
    ("age_group", 4),
    ("height", 3),
    ("build", 3),
    ("hair_color", 5),
    ("hair_style", 4),
    ("upper_color", 12),
    ("upper_type", 6),
    ("lower_color", 12),
    ("lower_type", 6),
    ("shoe_color", 8),
    ("shoe_type", 4),
    ("bag", 5),
    ("headwear", 4),
    ("accessory", 10),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub cardinality: usize,
}

impl Attribute {
    /// Number of binary dimensions this attribute occupies.
    pub fn width(&self) -> usize {
        self.cardinality
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
    offsets: Vec<usize>,
    total_binary_dims: usize,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        AttributeSchema::new(
            DEFAULT_ATTRIBUTES
                .iter()
                .map(|&(n, c)| (n.to_string(), c))
                .collect(),
        )
        .expect("default schema is valid")
    }
}

impl AttributeSchema {
    pub fn new(attributes: Vec<(String, usize)>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Config("schema has no attributes".into()));
        }
        let mut seen = HashSet::new();
        let mut offsets = Vec::with_capacity(attributes.len());
        let mut total = 0;
        for (name, card) in &attributes {
            if name.is_empty() || !seen.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate or empty attribute name `{name}`")));
            }
            if *card == 0 {
                return Err(Error::Config(format!("attribute `{name}` has cardinality 0")));
            }
            offsets.push(total);
            total += card;
        }
        Ok(AttributeSchema {
            attributes: attributes
                .into_iter()
                .map(|(name, cardinality)| Attribute { name, cardinality })
                .collect(),
            offsets,
            total_binary_dims: total,
        })
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// M, the number of binary attribute dimensions.
    pub fn total_binary_dims(&self) -> usize {
        self.total_binary_dims
    }

    /// Offset of attribute `index` inside the binary vector.
    pub fn offset(&self, index: usize) -> usize {
        self.offsets[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Name of binary dimension `k`, e.g. `upper_color=3` or `bag` for a
    /// single-bit attribute.
    pub fn binary_name(&self, k: usize) -> String {
        let attr = self.offsets.partition_point(|&o| o <= k) - 1;
        let a = &self.attributes[attr];
        if a.cardinality == 1 {
            a.name.clone()
        } else {
            format!("{}={}", a.name, k - self.offsets[attr])
        }
    }

    pub fn binary_names(&self) -> Vec<String> {
        (0..self.total_binary_dims).map(|k| self.binary_name(k)).collect()
    }

    /// Parses the `name,cardinality` line format; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut attrs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, card) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `name,cardinality`"))?;
            let card: usize = card
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad cardinality `{}`", card.trim())))?;
            attrs.push((name.trim().to_string(), card));
        }
        AttributeSchema::new(attrs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        AttributeSchema::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {} attributes, {} binary dims\n", self.len(), self.total_binary_dims);
        for a in &self.attributes {
            let _ = writeln!(s, "{},{}", a.name, a.cardinality);
        }
        s
    }

    /// One-hot expansion of per-attribute category indices.
    pub fn encode(&self, raw: &[usize]) -> Result<AttributeVector> {
        if raw.len() != self.attributes.len() {
            return Err(Error::SchemaMismatch {
                expected: self.attributes.len(),
                actual: raw.len(),
            });
        }
        let mut bits = vec![0u8; self.total_binary_dims];
        for ((attr, &offset), &index) in self.attributes.iter().zip(&self.offsets).zip(raw) {
            if attr.cardinality == 1 {
                if index > 1 {
                    return Err(Error::IndexOutOfRange {
                        attribute: attr.name.clone(),
                        index,
                        cardinality: 1,
                    });
                }
                bits[offset] = index as u8;
            } else {
                if index >= attr.cardinality {
                    return Err(Error::IndexOutOfRange {
                        attribute: attr.name.clone(),
                        index,
                        cardinality: attr.cardinality,
                    });
                }
                bits[offset + index] = 1;
            }
        }
        Ok(AttributeVector { bits })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeVector {
    bits: Vec<u8>,
}

impl AttributeVector {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidParam("attribute bits must be 0 or 1".into()));
        }
        Ok(AttributeVector { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseAttributeVector {
    pub bits: Vec<u8>,
    pub exclusive_count: usize,
    pub exclusive_indices: Vec<usize>,
    pub common_indices: Vec<usize>,
}

impl PairwiseAttributeVector {
    pub fn total(&self) -> usize {
        self.bits.len()
    }

    pub fn is_exclusive(&self, k: usize) -> bool {
        self.bits[k] == 1
    }

    /// True when the exclusive/common split is empty on one side.
    pub fn is_degenerate(&self) -> bool {
        self.exclusive_count == 0 || self.exclusive_count == self.bits.len()
    }
}

/// Element-wise XOR of two attribute vectors with the resulting index split.
pub fn pairwise_xor(a: &AttributeVector, b: &AttributeVector) -> Result<PairwiseAttributeVector> {
    if a.len() != b.len() {
        return Err(Error::SchemaMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let bits: Vec<u8> = a.bits.iter().zip(&b.bits).map(|(x, y)| x ^ y).collect();
    let (exclusive_indices, common_indices): (Vec<usize>, Vec<usize>) =
        (0..bits.len()).partition(|&k| bits[k] == 1);
    Ok(PairwiseAttributeVector {
        exclusive_count: exclusive_indices.len(),
        bits,
        exclusive_indices,
        common_indices,
    })
}

/// Per-person raw attribute indices, keyed by person id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTable {
    pub rows: BTreeMap<u32, Vec<usize>>,
}

impl AttributeTable {
    pub fn get(&self, person_id: u32) -> Option<&[usize]> {
        self.rows.get(&person_id).map(|v| v.as_slice())
    }

    pub fn parse(text: &str, schema: &AttributeSchema, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty attribute table"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"person_id") {
            return Err(Error::parse(path, 1, "header must start with `person_id`"));
        }
        if cols.len() - 1 != schema.len() {
            return Err(Error::parse(
                path,
                1,
                format!("expected {} attribute columns, found {}", schema.len(), cols.len() - 1),
            ));
        }
        // Columns may appear in any order; map them onto schema order.
        let mut order = Vec::with_capacity(schema.len());
        for name in &cols[1..] {
            let idx = schema
                .index_of(name)
                .ok_or_else(|| Error::parse(path, 1, format!("unknown attribute column `{name}`")))?;
            order.push(idx);
        }
        let mut rows = BTreeMap::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::parse(path, i + 1, "wrong number of fields"));
            }
            let pid: u32 = fields[0]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad person_id `{}`", fields[0])))?;
            let mut raw = vec![0usize; schema.len()];
            for (f, &slot) in fields[1..].iter().zip(&order) {
                raw[slot] = f
                    .parse()
                    .map_err(|_| Error::parse(path, i + 1, format!("bad category index `{f}`")))?;
            }
            schema
                .encode(&raw)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if rows.insert(pid, raw).is_some() {
                return Err(Error::parse(path, i + 1, format!("duplicate person_id {pid}")));
            }
        }
        Ok(AttributeTable { rows })
    }

    pub fn load(path: impl AsRef<Path>, schema: &AttributeSchema) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        AttributeTable::parse(&text, schema, path)
    }

    pub fn to_csv(&self, schema: &AttributeSchema) -> String {
        let mut s = String::from("person_id");
        for a in schema.attributes() {
            s.push(',');
            s.push_str(&a.name);
        }
        s.push('\n');
        for (pid, raw) in &self.rows {
            let _ = write!(s, "{pid}");
            for v in raw {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}
