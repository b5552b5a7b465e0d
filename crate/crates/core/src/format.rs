//! DPLE binary container: named f64 tensors, little-endian.
//!
//! ```text
//! "DPLE"  u32 version  u32 section_count
//! per section: u16 name_len, name (UTF-8), u8 rank, rank × u32 dims,
//!              product(dims) × f64 payload (row-major)
//! ```

use std::fs;
use std::path::Path;

use crate::adapter::PromptState;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{EmbeddingDataset, Record};
use crate::grad::Tensor;
use crate::learn::init_prompt_state;

pub const MAGIC: &[u8; 4] = b"DPLE";
pub const VERSION: u32 = 1;

/// A named tensor inside a DPLE file.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensor: Tensor,
}

impl Section {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Section {
            name: name.into(),
            tensor,
        }
    }
}

pub fn encode(sections: &[Section]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(sections.len())
        .map_err(|_| Error::Format("too many sections".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for s in sections {
        let name = s.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("section name too long: {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = s.tensor.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Format(format!("rank {} exceeds 255", shape.len())))?;
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in s.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing DPLE magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut sections = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("section `{name}` is too large")))?;
        let payload = r.take(numel)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        sections.push(Section::new(name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last section",
            bytes.len() - r.pos
        )));
    }
    Ok(sections)
}

pub fn write_file(path: &Path, sections: &[Section]) -> Result<()> {
    fs::write(path, encode(sections)?)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_file(path: &Path) -> Result<Vec<Section>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode(&bytes)
}

/// UTF-8 text stored as one f64 per byte.
pub fn text_tensor(text: &str) -> Tensor {
    Tensor::from_vec(text.bytes().map(f64::from).collect())
}

pub fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("text section holds non-byte value {v}")))
            }
        })
        .collect::<Result<_>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Format("text section is not UTF-8".into()))
}

fn find<'a>(sections: &'a [Section], name: &str) -> Result<&'a Tensor> {
    sections
        .iter()
        .find(|s| s.name == name)
        .map(|s| &s.tensor)
        .ok_or_else(|| Error::Format(format!("missing section `{name}`")))
}

fn expect_kind(sections: &[Section], kind: &str) -> Result<()> {
    let found = tensor_text(find(sections, "kind")?)?;
    if found != kind {
        return Err(Error::Format(format!("expected a {kind} file, found {found}")));
    }
    Ok(())
}

/// Sections for a dataset: name, class names, split, features, patches, labels.
pub fn dataset_sections(ds: &EmbeddingDataset) -> Result<Vec<Section>> {
    let n = ds.records.len();
    if n == 0 {
        return Err(Error::Data("cannot store an empty dataset".into()));
    }
    let (d, p) = (ds.d_domain(), ds.n_patches());
    let mut features = Vec::with_capacity(n * d);
    let mut patches = Vec::with_capacity(n * p * d);
    for r in &ds.records {
        features.extend_from_slice(r.feature.data());
        patches.extend_from_slice(r.patches.data());
    }
    let to_f = |v: &[usize]| Tensor::from_vec(v.iter().map(|&i| i as f64).collect());
    let labels: Vec<usize> = ds.records.iter().map(|r| r.label).collect();
    Ok(vec![
        Section::new("kind", text_tensor("dataset")),
        Section::new("name", text_tensor(&ds.name)),
        Section::new("class_names", text_tensor(&ds.class_names.join("\n"))),
        Section::new("base", to_f(&ds.base)),
        Section::new("novel", to_f(&ds.novel)),
        Section::new("features", Tensor::new(vec![n, d], features)?),
        Section::new("patches", Tensor::new(vec![n, p, d], patches)?),
        Section::new("labels", to_f(&labels)),
    ])
}

fn indices(t: &Tensor, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{what} holds non-index value {v}")))
            }
        })
        .collect()
}

pub fn dataset_from_sections(sections: &[Section]) -> Result<EmbeddingDataset> {
    expect_kind(sections, "dataset")?;
    let name = tensor_text(find(sections, "name")?)?;
    let class_names: Vec<String> = tensor_text(find(sections, "class_names")?)?
        .split('\n')
        .map(str::to_string)
        .collect();
    let features = find(sections, "features")?;
    let patches = find(sections, "patches")?;
    let labels = indices(find(sections, "labels")?, "labels")?;
    let (fs, ps) = (features.shape(), patches.shape());
    if fs.len() != 2 || ps.len() != 3 || ps[0] != fs[0] || ps[2] != fs[1] || labels.len() != fs[0] {
        return Err(Error::Format(format!(
            "inconsistent dataset shapes: features {fs:?}, patches {ps:?}, {} labels",
            labels.len()
        )));
    }
    let (n, d, p) = (fs[0], fs[1], ps[1]);
    let records = (0..n)
        .map(|i| {
            Ok(Record {
                feature: Tensor::new(vec![d], features.data()[i * d..(i + 1) * d].to_vec())?,
                patches: Tensor::new(vec![p, d], patches.data()[i * p * d..(i + 1) * p * d].to_vec())?,
                label: labels[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = EmbeddingDataset {
        name,
        records,
        class_names,
        base: indices(find(sections, "base")?, "base")?,
        novel: indices(find(sections, "novel")?, "novel")?,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &EmbeddingDataset) -> Result<()> {
    write_file(path, &dataset_sections(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    dataset_from_sections(&read_file(path)?)
}

/// Sections for a trained model: the config (which includes the frozen
/// encoder seed) and every trainable tensor. Frozen weights are not stored.
pub fn model_sections(config: &Config, state: &PromptState) -> Vec<Section> {
    let mut out = vec![
        Section::new("kind", text_tensor("model")),
        Section::new("config", text_tensor(&config.to_text())),
    ];
    for (name, t) in state.named_tensors() {
        out.push(Section::new(format!("param/{name}"), t.clone()));
    }
    out
}

pub fn model_from_sections(sections: &[Section]) -> Result<(Config, PromptState)> {
    expect_kind(sections, "model")?;
    let config = Config::parse(&tensor_text(find(sections, "config")?)?)?;
    let mut state = init_prompt_state(&config.train, &config.dims);
    let names: Vec<String> = state.named_tensors().into_iter().map(|(n, _)| n).collect();
    let stored = sections.iter().filter(|s| s.name.starts_with("param/")).count();
    if stored != names.len() {
        return Err(Error::Format(format!(
            "model stores {stored} parameters, config implies {}",
            names.len()
        )));
    }
    for (name, slot) in names.iter().zip(state.tensors_mut()) {
        let t = find(sections, &format!("param/{name}"))?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` is {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok((config, state))
}

pub fn save_model(path: &Path, config: &Config, state: &PromptState) -> Result<()> {
    write_file(path, &model_sections(config, state))
}

pub fn load_model(path: &Path) -> Result<(Config, PromptState)> {
    model_from_sections(&read_file(path)?)
}
