//! Binary checkpoints: the magic line `IRLM01`, a `key=value` header ended by a blank line,
//! then tensor records (u64 name length, name, u64 rank, u64 dims, f32 data, all
//! little-endian).

use std::io::Write;
use std::path::Path;

use crate::corpus::TokenMode;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Architecture, LcuConfig, ModelParams, Nonlinearity, Recurrent};

pub const MAGIC: &[u8] = b"IRLM01\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab_hash: String,
    pub token_mode: TokenMode,
    /// Decoder dropout probability used in training (sets mean-mask inference).
    pub dropout_prob: f64,
    pub step: u64,
    pub epoch: usize,
    /// Extra header lines, typically the effective training configuration.
    pub extra: Vec<(String, String)>,
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn matrix_tensor(name: &str, m: &Matrix) -> Tensor {
    Tensor {
        name: name.into(),
        dims: vec![m.rows(), m.cols()],
        data: m.as_slice().to_vec(),
    }
}

fn lookup<'a>(header: &'a [(String, String)], key: &str) -> Result<&'a str> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::data(format!("checkpoint header lacks {key}")))
}

fn parse_field<T: std::str::FromStr>(header: &[(String, String)], key: &str) -> Result<T> {
    let v = lookup(header, key)?;
    v.parse()
        .map_err(|_| Error::data(format!("checkpoint header has invalid {key}={v}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::data("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::data("checkpoint size field too large"))
    }
}

impl Checkpoint {
    fn header(&self) -> Vec<(String, String)> {
        let p = &self.params;
        let mut h: Vec<(String, String)> = vec![
            ("format_version".into(), FORMAT_VERSION.to_string()),
            ("arch".into(), p.architecture().name().into()),
            ("hidden".into(), p.hidden().to_string()),
            ("vocab_size".into(), p.vocab_size().to_string()),
            ("nonlinearity".into(), p.nonlinearity.name().into()),
            ("nonlinearity_a".into(), p.nonlinearity.a.to_string()),
            ("vocab_hash".into(), self.vocab_hash.clone()),
            ("token_mode".into(), self.token_mode.name().into()),
            ("dropout_prob".into(), self.dropout_prob.to_string()),
            ("step".into(), self.step.to_string()),
            ("epoch".into(), self.epoch.to_string()),
        ];
        if let Some(l) = p.lcu {
            h.push(("lcu_short".into(), l.n_short.to_string()));
            h.push(("lcu_long".into(), l.n_long.to_string()));
            h.push(("lcu_lower".into(), l.lower.to_string()));
            h.push(("lcu_upper".into(), l.upper.to_string()));
        }
        h.extend(self.extra.iter().cloned());
        h
    }

    fn tensors(&self) -> Vec<Tensor> {
        let p = &self.params;
        let mut t = vec![matrix_tensor("W", &p.encoder), matrix_tensor("Z", &p.decoder)];
        match &p.recurrent {
            Recurrent::Diagonal(r) => t.push(Tensor {
                name: "r".into(),
                dims: vec![r.len()],
                data: r.clone(),
            }),
            Recurrent::Dense(m) | Recurrent::Block { weights: m, .. } => t.push(matrix_tensor("R", m)),
        }
        if let Some(s) = &p.skip {
            t.push(matrix_tensor("R_skip", s));
        }
        t
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (k, v) in self.header() {
            debug_assert!(!k.contains(['=', '\n']) && !v.contains('\n'));
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.push(b'\n');
        for t in self.tensors() {
            out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u64).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let rest = &bytes[MAGIC.len()..];
        let end = rest
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::data("checkpoint header is not terminated"))?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| Error::data("checkpoint header is not UTF-8"))?;
        let mut header = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad checkpoint header line {line:?}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let version: u32 = parse_field(&header, "format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let arch: Architecture = lookup(&header, "arch")?.parse().map_err(|_| Error::data("bad arch"))?;
        let hidden: usize = parse_field(&header, "hidden")?;
        let vocab: usize = parse_field(&header, "vocab_size")?;
        let nonlinearity = Nonlinearity::parse(lookup(&header, "nonlinearity")?, parse_field(&header, "nonlinearity_a")?)
            .map_err(|e| Error::data(e.to_string()))?;
        let lcu = if lookup(&header, "lcu_short").is_ok() {
            Some(LcuConfig {
                n_short: parse_field(&header, "lcu_short")?,
                n_long: parse_field(&header, "lcu_long")?,
                lower: parse_field(&header, "lcu_lower")?,
                upper: parse_field(&header, "lcu_upper")?,
            })
        } else {
            None
        };

        let mut reader = Reader {
            bytes: &rest[end + 2..],
            pos: 0,
        };
        let mut tensors = Vec::new();
        while reader.pos < reader.bytes.len() {
            let nlen = reader.u64()?;
            let name = String::from_utf8(reader.take(nlen)?.to_vec()).map_err(|_| Error::data("bad tensor name"))?;
            let rank = reader.u64()?;
            if rank > 2 {
                return Err(Error::data(format!("tensor {name} has rank {rank}")));
            }
            let dims = (0..rank).map(|_| reader.u64()).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::data("tensor too large"))?;
            let raw = reader.take(count.checked_mul(4).ok_or_else(|| Error::data("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        let mut take = |name: &str, dims: &[usize]| -> Result<Option<Vec<f64>>> {
            let Some(i) = tensors.iter().position(|t| t.name == name) else {
                return Ok(None);
            };
            let t = tensors.swap_remove(i);
            if t.dims != dims {
                return Err(Error::data(format!(
                    "tensor {name} has shape {:?}, header implies {dims:?}",
                    t.dims
                )));
            }
            Ok(Some(t.data))
        };
        let need = |v: Option<Vec<f64>>, name: &str| v.ok_or_else(|| Error::data(format!("checkpoint lacks tensor {name}")));
        let encoder = Matrix::from_vec(hidden, vocab, need(take("W", &[hidden, vocab])?, "W")?);
        let decoder = Matrix::from_vec(vocab, hidden, need(take("Z", &[vocab, hidden])?, "Z")?);
        let recurrent = match arch {
            Architecture::Irlm => Recurrent::Diagonal(need(take("r", &[hidden])?, "r")?),
            Architecture::Rnn | Architecture::SkipRnn => {
                Recurrent::Dense(Matrix::from_vec(hidden, hidden, need(take("R", &[hidden, hidden])?, "R")?))
            }
            Architecture::BlockRnn => Recurrent::Block {
                weights: Matrix::from_vec(hidden, hidden, need(take("R", &[hidden, hidden])?, "R")?),
                split: lcu.ok_or_else(|| Error::data("block checkpoint lacks its split"))?.n_short,
            },
        };
        let skip = match arch {
            Architecture::SkipRnn => Some(Matrix::from_vec(
                hidden,
                hidden,
                need(take("R_skip", &[hidden, hidden])?, "R_skip")?,
            )),
            _ => None,
        };
        if let Some(t) = tensors.first() {
            return Err(Error::data(format!("unexpected tensor {}", t.name)));
        }
        let params = ModelParams {
            encoder,
            recurrent,
            decoder,
            skip,
            nonlinearity,
            lcu,
        };
        params.validate().map_err(|e| Error::data(e.to_string()))?;
        const KNOWN: &[&str] = &[
            "format_version",
            "arch",
            "hidden",
            "vocab_size",
            "nonlinearity",
            "nonlinearity_a",
            "vocab_hash",
            "token_mode",
            "dropout_prob",
            "step",
            "epoch",
            "lcu_short",
            "lcu_long",
            "lcu_lower",
            "lcu_upper",
        ];
        Ok(Checkpoint {
            params,
            vocab_hash: lookup(&header, "vocab_hash")?.to_string(),
            token_mode: lookup(&header, "token_mode")?
                .parse()
                .map_err(|_| Error::data("bad token_mode"))?,
            dropout_prob: parse_field(&header, "dropout_prob")?,
            step: parse_field(&header, "step")?,
            epoch: parse_field(&header, "epoch")?,
            extra: header
                .into_iter()
                .filter(|(k, _)| !KNOWN.contains(&k.as_str()))
                .collect(),
        })
    }

    /// Writes to a temporary sibling and renames it over `path`, so an interrupted write
    /// never replaces a good checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails with a data error naming both hashes when `vocab_hash` differs from the
    /// checkpoint's.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::data(format!(
                "vocabulary hash mismatch: checkpoint was trained with {} but the supplied vocabulary is {}",
                self.vocab_hash, vocab_hash
            )));
        }
        Ok(())
    }
}
