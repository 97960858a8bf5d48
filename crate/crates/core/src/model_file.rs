//! The on-disk model container: a tiny self-describing binary holding the
//! header (geometry, variant, provenance) and every learned tensor as raw
//! little-endian f32. No ecosystem format so the round trip stays bit-exact
//! and dependency-free.
//!
//! Layout: magic "R2CS", u16 version, u32-length-prefixed UTF-8 key=value
//! header, u32 tensor count, then per tensor a u32-length name, four u32
//! dimensions, and the payload. Anything off-script fails with the byte
//! offset where parsing stopped.

use crate::bundle::{build_variant, ModelBundle, Variant};
use crate::error::{Error, Result};
use crate::measurement::{MaskMode, SamplingConfig};
use crate::param::StateId;
use crate::reconstructor::ReconWidths;
use crate::tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"R2CS";
const VERSION: u16 = 1;

fn bad(offset: usize, msg: impl Into<String>) -> Error {
    Error::ModelFormat { offset: offset as u64, msg: msg.into() }
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Serializes the bundle to bytes. Weights and running statistics travel as
/// f32 tensors; optimizer scratch does not travel at all.
pub fn encode<E: Element>(bundle: &ModelBundle<E>) -> Result<Vec<u8>> {
    if bundle.mask.mode == MaskMode::Custom {
        return Err(bad(0, "custom masks are runtime compositions and cannot be persisted"));
    }
    let mut header = String::new();
    header.push_str(&format!("variant={}\n", bundle.variant.as_str()));
    header.push_str(&format!("block_h={}\n", bundle.cfg.block_h));
    header.push_str(&format!("block_w={}\n", bundle.cfg.block_w));
    header.push_str(&format!("channels={}\n", bundle.cfg.channels));
    header.push_str(&format!("rate={}\n", bundle.cfg.rate));
    header.push_str(&format!("t_steps={}\n", bundle.t_steps));
    header.push_str(&format!("l4={}\n", bundle.widths.l4));
    header.push_str(&format!("l5={}\n", bundle.widths.l5));
    header.push_str(&format!("res={}\n", bundle.widths.res));
    header.push_str(&format!("mask={}\n", bundle.mask.mode.as_str()));
    for st in bundle.states.iter() {
        header.push_str(&format!("bn.{}.batches_seen={}\n", st.name, st.batches_seen));
    }
    for (k, v) in &bundle.meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(bad(0, format!("meta key '{k}' is not header-safe")));
        }
        header.push_str(&format!("meta.{k}={v}\n"));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_str(&mut out, &header);

    let n_tensors = bundle.arena.len() + 2 * bundle.states.len();
    push_u32(&mut out, n_tensors as u32);
    let write_tensor = |out: &mut Vec<u8>, name: &str, shape: [usize; 4], data: &[f32]| {
        push_str(out, name);
        for d in shape {
            push_u32(out, d as u32);
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in bundle.arena.iter() {
        let data: Vec<f32> = p.value.data().iter().map(|v| v.as_f64() as f32).collect();
        write_tensor(&mut out, &p.name, p.value.shape(), &data);
    }
    for st in bundle.states.iter() {
        let c = st.mean.len();
        let mean: Vec<f32> = st.mean.iter().map(|&v| v as f32).collect();
        let var: Vec<f32> = st.var.iter().map(|&v| v as f32).collect();
        write_tensor(&mut out, &format!("{}.running_mean", st.name), [1, 1, 1, c], &mean);
        write_tensor(&mut out, &format!("{}.running_var", st.name), [1, 1, 1, c], &var);
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(bad(self.pos, format!("file truncated while reading {what}")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| bad(at, format!("invalid UTF-8 in {what}")))
    }
}

const HEADER_AT: usize = 6;

fn header_get<'m>(map: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| bad(HEADER_AT, format!("header is missing '{key}'")))
}

fn header_parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    header_get(map, key)?
        .parse()
        .map_err(|_| bad(HEADER_AT, format!("header value for '{key}' does not parse")))
}

/// Rebuilds a bundle from bytes: the header reconstructs the architecture,
/// then every tensor is matched by name and copied in. Unknown versions,
/// missing tensors, spare tensors, and shape clashes are all fatal.
pub fn decode<E: Element>(data: &[u8]) -> Result<ModelBundle<E>> {
    let mut cur = Cursor { data, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(bad(0, "not a model file (bad magic)"));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(bad(4, format!(
            "unsupported format version {version}, this build reads {VERSION}"
        )));
    }
    let header_text = cur.string("header")?;
    let mut header = BTreeMap::new();
    for line in header_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(HEADER_AT, format!("header line without '=': {line:?}")))?;
        if header.insert(k.to_string(), v.to_string()).is_some() {
            return Err(bad(HEADER_AT, format!("duplicate header key '{k}'")));
        }
    }

    let variant = Variant::parse(header_get(&header, "variant")?)
        .map_err(|e| bad(HEADER_AT, e.to_string()))?;
    let cfg = SamplingConfig::new(
        header_parse(&header, "block_h")?,
        header_parse(&header, "block_w")?,
        header_parse(&header, "channels")?,
        header_parse(&header, "rate")?,
    )?;
    let widths = ReconWidths {
        l4: header_parse(&header, "l4")?,
        l5: header_parse(&header, "l5")?,
        res: header_parse(&header, "res")?,
    };
    let t_steps: usize = header_parse(&header, "t_steps")?;
    let mask = MaskMode::parse(header_get(&header, "mask")?)
        .map_err(|e| bad(HEADER_AT, e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bundle = build_variant::<E>(variant, cfg, mask, widths, t_steps, &mut rng)?;

    let n_tensors = cur.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = cur.string("tensor name")?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = cur.u32("tensor shape")? as usize;
        }
        let count = shape.iter().product::<usize>();
        let at = cur.pos;
        let bytes = cur.take(4 * count, "tensor payload")?;
        let mut vals = Vec::with_capacity(count);
        for c in bytes.chunks_exact(4) {
            let f = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !f.is_finite() {
                return Err(bad(at, format!("non-finite value in tensor '{name}'")));
            }
            vals.push(E::of_f64(f as f64));
        }
        if tensors.insert(name.clone(), Tensor::from_vec(shape, vals)?).is_some() {
            return Err(bad(at, format!("duplicate tensor '{name}'")));
        }
    }
    if cur.pos != data.len() {
        return Err(bad(cur.pos, format!("unexpected {} trailing bytes", data.len() - cur.pos)));
    }

    let ids: Vec<_> = (0..bundle.arena.len()).collect();
    for i in ids {
        let id = crate::param::ParamId(i);
        let name = bundle.arena.get(id).name.clone();
        let t = tensors
            .remove(&name)
            .ok_or_else(|| bad(data.len(), format!("model file is missing tensor '{name}'")))?;
        bundle.arena.set_value(id, t)?;
    }
    for i in 0..bundle.states.len() {
        let id = StateId(i);
        let name = bundle.states.get(id).name.clone();
        let mean = tensors.remove(&format!("{name}.running_mean")).ok_or_else(|| {
            bad(data.len(), format!("model file is missing tensor '{name}.running_mean'"))
        })?;
        let var = tensors.remove(&format!("{name}.running_var")).ok_or_else(|| {
            bad(data.len(), format!("model file is missing tensor '{name}.running_var'"))
        })?;
        let seen: u64 = header_parse(&header, &format!("bn.{name}.batches_seen"))?;
        let st = bundle.states.get_mut(id);
        if mean.len() != st.mean.len() || var.len() != st.var.len() {
            return Err(bad(data.len(), format!("running stats for '{name}' have the wrong width")));
        }
        st.mean = mean.data().iter().map(|v| v.as_f64()).collect();
        st.var = var.data().iter().map(|v| v.as_f64()).collect();
        st.batches_seen = seen;
    }
    if let Some(name) = tensors.keys().next() {
        return Err(bad(data.len(), format!("unexpected tensor '{name}' in model file")));
    }
    for (k, v) in &header {
        if let Some(meta_key) = k.strip_prefix("meta.") {
            bundle.meta.insert(meta_key.to_string(), v.clone());
        }
    }
    Ok(bundle)
}

/// Write-temp-then-rename, so readers never observe a half-written file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
            std::process::id()
        )),
        None => Path::new(&format!(".out.tmp{}", std::process::id())).to_path_buf(),
    };
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_at(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| io_at(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io_at(path, e)
    })
}

pub fn save<E: Element>(bundle: &ModelBundle<E>, path: &Path) -> Result<()> {
    atomic_write(path, &encode(bundle)?)
}

pub fn load<E: Element>(path: &Path) -> Result<ModelBundle<E>> {
    let data = std::fs::read(path).map_err(|e| io_at(path, e))?;
    decode(&data)
}
