//! Parameter storage, layer builders, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by registration order; each
//! forward pass binds them onto a fresh [`Tape`] (frozen entries bind as
//! constants so backward skips them entirely).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::{Grads, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry<S: Scalar> {
    name: String,
    value: Array2<S>,
    frozen: bool,
}

pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Registers a named parameter; names must be unique.
    pub fn register(&mut self, name: &str, value: Array2<S>) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name: name.to_string(), value, frozen: false });
        ParamId(self.entries.len() - 1)
    }

    /// All parameter ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array2<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.entries[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`;
    /// returns how many entries matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// Binds all parameters onto `tape`. Frozen entries become constants.
    pub fn bind(&self, tape: &Tape<S>) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.frozen {
                    tape.constant(e.value.clone())
                } else {
                    tape.leaf(e.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Serializes every parameter (always f64 payload, so f32 stores
    /// round-trip exactly).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"PRMS")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.value.nrows() as u32).to_le_bytes())?;
            w.write_all(&(e.value.ncols() as u32).to_le_bytes())?;
            w.write_all(&[e.frozen as u8])?;
            for v in e.value.iter() {
                w.write_all(&v.into_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores values into an already-registered store; names, order, and
    /// shapes must match exactly.
    pub fn read_into<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PRMS" {
            return Err(Error::data("parameter blob: bad magic"));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::data(format!("parameter blob: unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        if count != self.entries.len() {
            return Err(Error::data(format!(
                "parameter blob: has {count} entries, model expects {}",
                self.entries.len()
            )));
        }
        for e in &mut self.entries {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::data("parameter blob: non-utf8 name"))?;
            if name != e.name {
                return Err(Error::data(format!(
                    "parameter blob: entry `{name}` does not match expected `{}`",
                    e.name
                )));
            }
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            if (rows, cols) != e.value.dim() {
                return Err(Error::data(format!(
                    "parameter blob: `{name}` is {rows}x{cols}, model expects {}x{}",
                    e.value.nrows(),
                    e.value.ncols()
                )));
            }
            let mut frozen = [0u8; 1];
            r.read_exact(&mut frozen)?;
            e.frozen = frozen[0] != 0;
            let mut buf = [0u8; 8];
            for v in e.value.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = S::from_f64(f64::from_le_bytes(buf));
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Tape handles for one bound forward pass.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Accumulates this pass's parameter gradients into `acc` (one slot per
/// registered parameter, in registration order).
pub fn collect_param_grads<S: Scalar>(
    store: &ParamStore<S>,
    binding: &Binding,
    grads: &mut Grads<S>,
    acc: &mut [Option<Array2<S>>],
) {
    assert_eq!(acc.len(), store.len());
    for i in 0..store.len() {
        if let Some(g) = grads.take(binding.vars[i]) {
            match &mut acc[i] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }
    }
}

pub fn zeroed_grad_buffer<S: Scalar>(store: &ParamStore<S>) -> Vec<Option<Array2<S>>> {
    (0..store.len()).map(|_| None).collect()
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Option<Array2<S>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for v in g.iter() {
            let x = v.into_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = lit::<S>(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

// ── initializers ────────────────────────────────────────────────────────

/// Xavier/Glorot uniform init in ±√(6/(fan_in+fan_out)).
pub fn xavier_uniform<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| lit::<S>((rng.gen::<f64>() * 2.0 - 1.0) * a))
}

pub fn zeros<S: Scalar>(rows: usize, cols: usize) -> Array2<S> {
    Array2::zeros((rows, cols))
}

pub fn ones<S: Scalar>(rows: usize, cols: usize) -> Array2<S> {
    Array2::from_elem((rows, cols), S::one())
}

pub fn identity<S: Scalar>(n: usize) -> Array2<S> {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { S::one() } else { S::zero() })
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ── layers ──────────────────────────────────────────────────────────────

pub fn linear<S: Scalar>(tape: &Tape<S>, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = tape.matmul(x, w);
    match b {
        Some(b) => tape.add_row(y, b),
        None => y,
    }
}

/// Layer norm with learned gain and bias (1×n each).
pub fn layer_norm<S: Scalar>(tape: &Tape<S>, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.layer_norm_rows(x);
    let g = tape.mul_row(n, gain);
    tape.add_row(g, bias)
}

pub struct Attention {
    pub out: Var,
    /// Per-head attention probabilities, each n_query×n_key.
    pub probs: Vec<Var>,
}

/// Multi-head scaled dot-product attention. Projections are bias-free, so
/// an all-zero query row yields uniform attention. `key_mask` is an additive
/// 1×n_key row (large negative entries exclude keys).
pub fn multi_head_attention<S: Scalar>(
    tape: &Tape<S>,
    query_in: Var,
    kv_in: Var,
    heads: usize,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    key_mask: Option<&Array2<S>>,
) -> Attention {
    let c = tape.shape(wq).1;
    assert!(heads > 0 && c % heads == 0, "model width {c} not divisible by {heads} heads");
    let d = c / heads;
    let scale = lit::<S>(1.0 / (d as f64).sqrt());

    let q = tape.matmul(query_in, wq);
    let k = tape.matmul(kv_in, wk);
    let v = tape.matmul(kv_in, wv);

    let mut probs = Vec::with_capacity(heads);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let scores = tape.scale(tape.matmul(qh, kt), scale);
        let p = tape.softmax_rows(scores, key_mask);
        probs.push(p);
        head_outs.push(tape.matmul(p, vh));
    }
    let merged = tape.concat_cols(&head_outs);
    let out = tape.matmul(merged, wo);
    Attention { out, probs }
}

/// Two-layer feed-forward with GELU.
pub fn ffn<S: Scalar>(tape: &Tape<S>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = linear(tape, x, w1, Some(b1));
    let a = tape.gelu(h);
    linear(tape, a, w2, Some(b2))
}

// ── optimizer ───────────────────────────────────────────────────────────

/// Step-decay schedule: the rate is multiplied by `decay` once per milestone
/// that the epoch has reached.
pub fn lr_at_epoch(base_lr: f64, milestones: &[usize], decay: f64, epoch: usize) -> f64 {
    let hits = milestones.iter().filter(|&&m| epoch >= m).count();
    base_lr * decay.powi(hits as i32)
}

pub struct Adam<S: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let m = store.entries.iter().map(|e| Array2::zeros(e.value.dim())).collect();
        let v = store.entries.iter().map(|e| Array2::zeros(e.value.dim())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One update over all parameters; frozen entries and entries without a
    /// gradient are left untouched (their moments are not advanced).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Array2<S>>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let b1 = lit::<S>(self.beta1);
        let b2 = lit::<S>(self.beta2);
        let one = S::one();
        let bc1 = lit::<S>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = lit::<S>(1.0 - self.beta2.powi(self.t as i32));
        let lr_s = lit::<S>(lr);
        let eps = lit::<S>(self.eps);

        for (i, entry) in store.entries.iter_mut().enumerate() {
            if entry.frozen {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p = *p - lr_s * mh / (vh.sqrt() + eps);
                });
        }
    }

    /// Serializes moment estimates and the step counter (f64 payload, so
    /// f32 states round-trip exactly).
    pub fn write_state<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"ADM1")?;
        w.write_all(&self.t.to_le_bytes())?;
        w.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for (m, v) in self.m.iter().zip(&self.v) {
            w.write_all(&(m.nrows() as u32).to_le_bytes())?;
            w.write_all(&(m.ncols() as u32).to_le_bytes())?;
            for x in m.iter().chain(v.iter()) {
                w.write_all(&x.into_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores state written by `write_state`; entry count and shapes must
    /// match the store this optimizer was built for.
    pub fn read_state<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"ADM1" {
            return Err(Error::data("optimizer blob: bad magic"));
        }
        let mut t = [0u8; 8];
        r.read_exact(&mut t)?;
        self.t = u64::from_le_bytes(t);
        let count = read_u32(r)? as usize;
        if count != self.m.len() {
            return Err(Error::data(format!(
                "optimizer blob: has {count} entries, model expects {}",
                self.m.len()
            )));
        }
        for i in 0..count {
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            if (rows, cols) != self.m[i].dim() {
                return Err(Error::data(format!(
                    "optimizer blob: entry {i} is {rows}x{cols}, model expects {}x{}",
                    self.m[i].nrows(),
                    self.m[i].ncols()
                )));
            }
            let mut buf = [0u8; 8];
            for x in self.m[i].iter_mut().chain(self.v[i].iter_mut()) {
                r.read_exact(&mut buf)?;
                *x = S::from_f64(f64::from_le_bytes(buf));
            }
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}
