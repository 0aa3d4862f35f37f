//! `WLT1` checkpoint archive.
//!
//! Layout, little-endian: magic `WLT1`, u32 version (1), u64 training step,
//! u64 optimizer step, u32 metadata length + UTF-8 metadata (the run config),
//! u32 entry count, then per entry: u32 name length, UTF-8 name, u32 rank,
//! `rank` u64 dims, f64 values. Entry names are `param.<p>`, `adam.m.<p>`,
//! `adam.v.<p>` and `ema.<p>`, each group in parameter order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

use super::optim::{AdamWConfig, OptimizerState};
use super::TrainState;

const MAGIC: &[u8; 4] = b"WLT1";
const VERSION: u32 = 1;
const GROUPS: [&str; 4] = ["param.", "adam.m.", "adam.v.", "ema."];

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.r.read_exact(&mut b).map_err(|e| Error::Format(format!("checkpoint truncated reading {what}: {e}")))?;
        Ok(b)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }
    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.bytes(n, what)?).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Writes parameters, optimizer moments and EMA weights.
pub fn save<W: Write>(state: &TrainState, meta: &str, mut w: W) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, state.step);
    put_u64(&mut out, state.opt.step);
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(meta.as_bytes());
    let names = state.params.names();
    put_u32(&mut out, 4 * names.len() as u32);
    let groups: [&[Tensor]; 4] = [state.params.values(), &state.opt.m, &state.opt.v, state.ema.values()];
    for (prefix, values) in GROUPS.iter().zip(groups) {
        for (n, t) in names.iter().zip(values) {
            put_entry(&mut out, &format!("{prefix}{n}"), t);
        }
    }
    w.write_all(&out)?;
    Ok(())
}

/// Reads a checkpoint; `adamw` supplies hyperparameters, which live in the config.
pub fn load<R: Read>(r: R, adamw: AdamWConfig) -> Result<(TrainState, String)> {
    let mut r = Reader { r };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("not a WLT1 checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let step = r.u64("step")?;
    let opt_step = r.u64("optimizer step")?;
    let meta = r.string("metadata")?;
    let count = r.u32("entry count")? as usize;
    if count % 4 != 0 {
        return Err(Error::Format(format!("entry count {count} is not a multiple of 4")));
    }
    let per = count / 4;
    let mut groups: [Vec<(String, Tensor)>; 4] = Default::default();
    for (g, prefix) in GROUPS.iter().enumerate() {
        for _ in 0..per {
            let name = r.string("entry name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.bytes(8 * n, &name)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            let bare = name
                .strip_prefix(prefix)
                .ok_or_else(|| Error::Format(format!("expected a '{prefix}' entry, found '{name}'")))?
                .to_string();
            groups[g].push((bare, Tensor::new(&shape, data)?));
        }
    }
    for g in &groups[1..] {
        for ((a, ta), (b, tb)) in groups[0].iter().zip(g) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Format(format!("entry '{b}' does not match parameter '{a}'")));
            }
        }
    }
    let [params, m, v, ema] = groups;
    let to_store = |g: Vec<(String, Tensor)>| {
        let mut s = ParamStore::new();
        for (n, t) in g {
            s.add(n, t);
        }
        s
    };
    let opt = OptimizerState {
        cfg: adamw,
        m: m.into_iter().map(|(_, t)| t).collect(),
        v: v.into_iter().map(|(_, t)| t).collect(),
        step: opt_step,
    };
    Ok((TrainState { params: to_store(params), ema: to_store(ema), opt, step }, meta))
}

pub fn save_file(state: &TrainState, meta: &str, path: &Path) -> Result<()> {
    // write-then-rename so an interrupted save never clobbers the last good file
    let tmp = path.with_extension("tmp");
    save(state, meta, std::io::BufWriter::new(std::fs::File::create(&tmp)?))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_file(path: &Path, adamw: AdamWConfig) -> Result<(TrainState, String)> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
    load(std::io::BufReader::new(f), adamw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamStore::new();
        p.add("a", Tensor::randn(&[2, 3], 1.0, &mut rng));
        p.add("b.c", Tensor::randn(&[4], 1.0, &mut rng));
        p.add("s", Tensor::scalar(-0.0));
        let mut s = TrainState::new(p, AdamWConfig::default());
        for t in s.opt.m.iter_mut().chain(s.opt.v.iter_mut()).chain(s.ema.values_mut().iter_mut()) {
            *t = Tensor::randn(t.shape(), 1.0, &mut rng);
        }
        s.step = 17;
        s.opt.step = 17;
        s
    }

    fn bits(t: &[Tensor]) -> Vec<u64> {
        t.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = state();
        let mut buf = Vec::new();
        save(&s, "seed = 1", &mut buf).unwrap();
        let (back, meta) = load(buf.as_slice(), AdamWConfig::default()).unwrap();
        assert_eq!(meta, "seed = 1");
        assert_eq!(back.step, 17);
        assert_eq!(back.params.names(), s.params.names());
        assert_eq!(bits(back.params.values()), bits(s.params.values()));
        assert_eq!(bits(&back.opt.m), bits(&s.opt.m));
        assert_eq!(bits(&back.opt.v), bits(&s.opt.v));
        assert_eq!(bits(back.ema.values()), bits(s.ema.values()));
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let mut buf = Vec::new();
        save(&state(), "", &mut buf).unwrap();
        assert!(matches!(load(&buf[..buf.len() - 3], AdamWConfig::default()), Err(Error::Format(_))));
        buf[3] = b'2';
        assert!(matches!(load(buf.as_slice(), AdamWConfig::default()), Err(Error::Format(_))));
    }
}
