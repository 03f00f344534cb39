//! `ut-ckpt-v1` model container: a text header with the model kind and its
//! configuration, then every named parameter tensor as little-endian f64.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AnyModel, RnnConfig, RnnModel, Seq2Seq, UtConfig, UtModel};
use crate::tensor::Tensor;

const MAGIC: &str = "ut-ckpt-v1";

pub fn to_bytes(model: &AnyModel) -> Vec<u8> {
    let mut out = format!("{MAGIC}\nmodel = {}\n", model.kind());
    let kv = match model {
        AnyModel::Ut(m) => m.config().to_kv(),
        AnyModel::Rnn(m) => m.config().to_kv(),
    };
    for (k, v) in kv {
        out.push_str(&format!("{k} = {v}\n"));
    }
    let params = model.params();
    out.push_str(&format!("\nparams {}\n", params.len()));
    let mut bytes = out.into_bytes();
    for (_, name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        bytes.extend_from_slice(format!("{name} {}\n", dims.join("x")).as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save(path: &Path, model: &AnyModel) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AnyModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("unexpected end of file"))?;
        self.pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header line is not UTF-8"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(bad("truncated tensor data"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn bad(message: &str) -> Error {
    Error::format("checkpoint", message)
}

pub fn from_bytes(bytes: &[u8]) -> Result<AnyModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.line()? != MAGIC {
        return Err(bad("missing `ut-ckpt-v1` header"));
    }
    let mut kv = BTreeMap::new();
    loop {
        let line = cur.line()?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line.split_once(" = ").ok_or_else(|| bad(&format!("bad config line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let kind = kv.remove("model").ok_or_else(|| bad("missing model kind"))?;
    // parameters are overwritten below, so the initialization seed is irrelevant
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = match kind.as_str() {
        "ut" => AnyModel::Ut(UtModel::new(UtConfig::from_kv(&kv)?, &mut rng)?),
        "rnn" => AnyModel::Rnn(RnnModel::new(RnnConfig::from_kv(&kv)?, &mut rng)?),
        other => return Err(bad(&format!("unknown model kind `{other}`"))),
    };
    let count: usize = cur
        .line()?
        .strip_prefix("params ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing `params <count>` line"))?;
    if count != model.params().len() {
        return Err(bad(&format!("{count} tensors stored, model has {}", model.params().len())));
    }
    for _ in 0..count {
        let line = cur.line()?;
        let (name, dims) = line.rsplit_once(' ').ok_or_else(|| bad("bad tensor line"))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(&format!("bad shape `{dims}`"))))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let id = model
            .params()
            .id(name)
            .ok_or_else(|| bad(&format!("unknown parameter `{name}`")))?;
        model.params_mut().set(id, Tensor::new(&shape, data)?)?;
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    if !model.params().all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(model)
}
