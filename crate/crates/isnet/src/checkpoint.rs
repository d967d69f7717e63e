//! ISNC checkpoint format: a flat sequence of named float32 tensors.
//!
//! Everything a resume needs rides in the same container: model parameters
//! under their store names, optimizer momentum buffers under
//! `optim.momentum.*`, and scalar state (iteration, RNG position, model
//! hyperparameters) as `meta.*` tensors whose entries are byte values.
//! Entry order is fixed, so save -> load -> save is byte-identical.

use crate::error::{IsnetError, Result};
use crate::fusion::DEFAULT_ATTENTION_CAP;
use crate::model::{ModelConfig, Variant};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const ISNC_MAGIC: &[u8; 4] = b"ISNC";
const ISNC_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub model: ModelConfig,
    pub params: Vec<(String, Tensor<f32>)>,
    pub momentum: Vec<(String, Tensor<f32>)>,
    pub rng_word_pos: u128,
}

fn bytes_tensor(bytes: &[u8]) -> Tensor<f32> {
    Tensor::from_vec(vec![bytes.len()], bytes.iter().map(|&b| b as f32).collect()).unwrap()
}

fn tensor_bytes(name: &str, t: &Tensor<f32>, want: usize) -> Result<Vec<u8>> {
    if t.len() != want {
        return Err(IsnetError::data(format!(
            "{name} holds {} entries, expected {want}",
            t.len()
        )));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(IsnetError::data(format!("{name} entry {v} is not a byte value")))
            }
        })
        .collect()
}

impl Checkpoint {
    /// Entries in serialization order.
    fn entries(&self) -> Vec<(String, Tensor<f32>)> {
        let m = &self.model;
        let variant_idx = Variant::ALL.iter().position(|&v| v == m.variant).unwrap() as f32;
        let mut out = vec![
            ("meta.iteration".into(), bytes_tensor(&self.iteration.to_le_bytes())),
            ("meta.rng_word_pos".into(), bytes_tensor(&self.rng_word_pos.to_le_bytes())),
            ("meta.model_seed".into(), bytes_tensor(&m.seed.to_le_bytes())),
            (
                "meta.model".into(),
                Tensor::from_vec(
                    vec![7],
                    vec![
                        m.c as f32,
                        m.k as f32,
                        m.aux_hidden as f32,
                        variant_idx,
                        m.dropout as f32,
                        m.alpha as f32,
                        m.attention_cap as f32,
                    ],
                )
                .unwrap(),
            ),
        ];
        out.extend(self.params.iter().cloned());
        out.extend(
            self.momentum
                .iter()
                .map(|(name, t)| (format!("optim.momentum.{name}"), t.clone())),
        );
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ISNC_MAGIC);
        buf.push(ISNC_VERSION);
        for (name, tensor) in self.entries() {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(tensor.rank() as u8);
            for &e in tensor.shape() {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        struct Cursor<'a> {
            raw: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
                if self.pos + n > self.raw.len() {
                    return Err(IsnetError::Format {
                        offset: self.raw.len() as u64,
                        message: format!("truncated while reading {what}"),
                    });
                }
                let slice = &self.raw[self.pos..self.pos + n];
                self.pos += n;
                Ok(slice)
            }
        }
        let raw = std::fs::read(path)?;
        let mut cur = Cursor { raw: &raw, pos: 0 };
        if cur.take(4, "magic")? != ISNC_MAGIC {
            return Err(IsnetError::Format { offset: 0, message: "bad magic".into() });
        }
        let version = cur.take(1, "version")?[0];
        if version != ISNC_VERSION {
            return Err(IsnetError::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
        while cur.pos < raw.len() {
            let name_len =
                u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap()) as usize;
            let name_offset = cur.pos as u64;
            let name = String::from_utf8(cur.take(name_len, "name")?.to_vec()).map_err(|_| {
                IsnetError::Format { offset: name_offset, message: "name is not UTF-8".into() }
            })?;
            let rank = cur.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cur.take(4, "extent")?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let payload = cur.take(4 * count, "payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            named.push((name, Tensor::from_vec(shape, data)?));
        }

        let mut pop = |name: &str| -> Result<Tensor<f32>> {
            let at = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| IsnetError::data(format!("checkpoint lacks {name}")))?;
            Ok(named.remove(at).1)
        };
        let iteration = u64::from_le_bytes(
            tensor_bytes("meta.iteration", &pop("meta.iteration")?, 8)?.try_into().unwrap(),
        );
        let rng_word_pos = u128::from_le_bytes(
            tensor_bytes("meta.rng_word_pos", &pop("meta.rng_word_pos")?, 16)?
                .try_into()
                .unwrap(),
        );
        let seed = u64::from_le_bytes(
            tensor_bytes("meta.model_seed", &pop("meta.model_seed")?, 8)?.try_into().unwrap(),
        );
        let meta = pop("meta.model")?;
        if meta.len() != 7 {
            return Err(IsnetError::data("meta.model must hold 7 entries"));
        }
        let d = meta.data();
        let variant = *Variant::ALL
            .get(d[3] as usize)
            .ok_or_else(|| IsnetError::data(format!("unknown variant index {}", d[3])))?;
        let model = ModelConfig {
            c: d[0] as usize,
            k: d[1] as usize,
            aux_hidden: d[2] as usize,
            variant,
            dropout: d[4] as f64,
            alpha: d[5] as f64,
            attention_cap: if d[6] as usize == 0 { DEFAULT_ATTENTION_CAP } else { d[6] as usize },
            seed,
        };
        let mut params = Vec::new();
        let mut momentum = Vec::new();
        for (name, tensor) in named {
            if let Some(bare) = name.strip_prefix("optim.momentum.") {
                momentum.push((bare.to_string(), tensor));
            } else {
                params.push((name, tensor));
            }
        }
        Ok(Checkpoint { iteration, model, params, momentum, rng_word_pos })
    }
}
