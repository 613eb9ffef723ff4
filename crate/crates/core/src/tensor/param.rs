//! Named parameter store, SGD optimizer state, and checkpoint files.
//!
//! Parameters live outside any tape. A training step binds them onto a
//! fresh tape as inputs, runs forward/backward, then feeds the leaf
//! gradients back through [`ParamStore::sgd_step`].
//!
//! Checkpoints are a flat sequence of named f32 tensors (little-endian):
//!
//! ```text
//! magic "CVFK" | version u32
//! repeat until EOF:
//!   name_len u32 | name utf-8 | rank u32 | extent u32 × rank | payload f32 × numel
//! ```
//!
//! Optimizer momentum is stored alongside the weights as `<name>#m`
//! entries and the global step counter as `__step`, so training resumes
//! exactly: save → load → save reproduces the file byte for byte.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Array;

const MAGIC: &[u8; 4] = b"CVFK";
const VERSION: u32 = 1;
const MOMENTUM_SUFFIX: &str = "#m";
const STEP_ENTRY: &str = "__step";

#[derive(Clone)]
struct Param {
    name: String,
    value: Array,
    momentum: Vec<f64>,
}

/// All trainable state of a model plus optimizer slots.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    /// Completed optimizer steps; drives schedules across resumes.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Slot for `name`, creating it with `init` on first use.
    pub fn get_or_init(&mut self, name: &str, init: impl FnOnce() -> Array) -> usize {
        if let Some(&slot) = self.index.get(name) {
            return slot;
        }
        let value = init();
        assert!(value.is_finite(), "parameter {name} initialized with non-finite values");
        let momentum = vec![0.0; value.numel()];
        self.params.push(Param {
            name: name.to_string(),
            value,
            momentum,
        });
        let slot = self.params.len() - 1;
        self.index.insert(name.to_string(), slot);
        slot
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, slot: usize) -> &Array {
        &self.params[slot].value
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.params[slot].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SGD with classical momentum: `v ← μ v + g`, `w ← w − lr·v`.
    /// `grads` pairs slots with gradient buffers; slots not listed are
    /// untouched. Increments the step counter once.
    pub fn sgd_step(&mut self, grads: &[(usize, Vec<f64>)], lr: f64, momentum: f64) {
        for (slot, g) in grads {
            let p = &mut self.params[*slot];
            assert_eq!(
                g.len(),
                p.value.numel(),
                "gradient length mismatch for {}",
                p.name
            );
            for i in 0..g.len() {
                assert!(
                    g[i].is_finite(),
                    "non-finite gradient for parameter {}",
                    p.name
                );
                p.momentum[i] = momentum * p.momentum[i] + g[i];
                p.value.data[i] -= lr * p.momentum[i];
            }
        }
        self.step += 1;
    }

    /// Write a checkpoint atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for p in &self.params {
            write_entry(&mut buf, &p.name, &p.value.shape, &p.value.data);
        }
        for p in &self.params {
            let name = format!("{}{}", p.name, MOMENTUM_SUFFIX);
            write_entry(&mut buf, &name, &p.value.shape, &p.momentum);
        }
        write_entry(&mut buf, STEP_ENTRY, &[1], &[self.step as f64]);

        let tmp = path.with_extension("ckpt.tmp");
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Read a checkpoint written by [`ParamStore::save`].
    pub fn load(path: &Path) -> Result<ParamStore> {
        let bytes = fs::read(path)?;
        let bad = |msg: String| Error::Format {
            path: path.display().to_string(),
            msg,
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut store = ParamStore::new();
        let mut pending_momentum: Vec<(String, Vec<f64>)> = Vec::new();
        let mut cur = &bytes[8..];
        while !cur.is_empty() {
            let (name, shape, data, rest) = read_entry(cur).map_err(|m| bad(m))?;
            cur = rest;
            if name == STEP_ENTRY {
                if data.len() != 1 {
                    return Err(bad("malformed step entry".into()));
                }
                store.step = data[0] as u64;
            } else if let Some(base) = name.strip_suffix(MOMENTUM_SUFFIX) {
                pending_momentum.push((base.to_string(), data));
            } else {
                let slot = store.get_or_init(&name, || Array::new(shape.clone(), data.clone()));
                if store.params[slot].value.shape != shape {
                    return Err(bad(format!("duplicate entry {name} with different shape")));
                }
            }
        }
        for (base, m) in pending_momentum {
            let slot = store
                .slot(&base)
                .ok_or_else(|| bad(format!("momentum entry for unknown parameter {base}")))?;
            if m.len() != store.params[slot].value.numel() {
                return Err(bad(format!("momentum length mismatch for {base}")));
            }
            store.params[slot].momentum = m;
        }
        Ok(store)
    }
}

fn write_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

type Entry<'a> = (String, Vec<usize>, Vec<f64>, &'a [u8]);

fn read_entry(cur: &[u8]) -> std::result::Result<Entry<'_>, String> {
    let mut r = cur;
    let name_len = read_u32(&mut r)? as usize;
    if r.len() < name_len {
        return Err("truncated entry name".into());
    }
    let name = std::str::from_utf8(&r[..name_len])
        .map_err(|_| "entry name is not utf-8".to_string())?
        .to_string();
    r = &r[name_len..];
    let rank = read_u32(&mut r)? as usize;
    if rank > 8 {
        return Err(format!("implausible rank {rank} for {name}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if r.len() < numel * 4 {
        return Err(format!("truncated payload for {name}"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let v = f32::from_le_bytes(r[i * 4..i * 4 + 4].try_into().unwrap());
        data.push(v as f64);
    }
    r = &r[numel * 4..];
    Ok((name, shape, data, r))
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    if r.len() < 4 {
        return Err("truncated header field".into());
    }
    let v = u32::from_le_bytes(r[..4].try_into().unwrap());
    *r = &r[4..];
    Ok(v)
}
