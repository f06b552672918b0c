//! Learnable parameters of the three small heads and their checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::matrix::Matrix;
use super::tape::{NodeId, Tape};

/// Canonical tensor names.
pub mod names {
    pub const ADAPTER_W1: &str = "adapter.w1";
    pub const ADAPTER_B1: &str = "adapter.b1";
    pub const ADAPTER_W2: &str = "adapter.w2";
    pub const ADAPTER_B2: &str = "adapter.b2";
    pub const UNCERTAINTY_W: &str = "uncertainty.w";
    pub const UNCERTAINTY_B: &str = "uncertainty.b";
    pub const MASK_W: &str = "mask.w";
    pub const MASK_B: &str = "mask.b";
}

const MAGIC: &[u8; 4] = b"GGPK";
const VERSION: u32 = 1;

/// Named parameter tensors with shapes fixed at construction.
///
/// Holds the two-layer adapter (`C1 -> H -> C`), the single-layer
/// uncertainty head (`(C1+C) -> 1`) and the linear mask head (`C -> C`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    tensors: BTreeMap<String, Matrix<S>>,
    c1: usize,
    hidden: usize,
    c: usize,
}

impl<S: Scalar> ParamStore<S> {
    /// Random initialization (uniform He-style fan-in scaling), seeded.
    pub fn init(c1: usize, hidden: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let mut w = |name: &str, rows: usize, cols: usize, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let m = Matrix::from_fn(rows, cols, |_, _| {
                S::from_f64_lossy(rng.gen_range(-bound..bound))
            });
            tensors.insert(name.to_string(), m);
        };
        w(names::ADAPTER_W1, c1, hidden, c1);
        w(names::ADAPTER_W2, hidden, c, hidden);
        w(names::UNCERTAINTY_W, c1 + c, 1, c1 + c);
        w(names::MASK_W, c, c, c);
        tensors.insert(names::ADAPTER_B1.into(), Matrix::zeros(1, hidden));
        tensors.insert(names::ADAPTER_B2.into(), Matrix::zeros(1, c));
        // The uncertainty head starts optimistic: with a +3 bias every point
        // begins near full weight (sigmoid(3) ~ 0.95) and the head has to
        // accumulate evidence against a point before down-weighting it, the
        // same prior-bias trick used for gates and rare-class detectors.
        tensors.insert(
            names::UNCERTAINTY_B.into(),
            Matrix::from_fn(1, 1, |_, _| S::from_f64_lossy(3.0)),
        );
        tensors.insert(names::MASK_B.into(), Matrix::zeros(1, c));
        ParamStore {
            tensors,
            c1,
            hidden,
            c,
        }
    }

    /// All-zero parameters; useful for tests with analytic expectations.
    pub fn zeros(c1: usize, hidden: usize, c: usize) -> Self {
        let mut s = Self::init(c1, hidden, c, 0);
        for m in s.tensors.values_mut() {
            m.fill(S::zero());
        }
        s
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c1, self.hidden, self.c)
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter tensor '{name}'")))
    }

    pub fn set(&mut self, name: &str, value: Matrix<S>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter tensor '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dimension(
                format!("ParamStore::set {name}"),
                format!("{}x{}", slot.rows(), slot.cols()),
                format!("{}x{}", value.rows(), value.cols()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Tensors in deterministic (sorted-name) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Two-layer adapter forward, recorded on the tape:
    /// `relu(geo · W1 + b1) · W2 + b2`.
    pub fn adapter_forward(&self, tape: &mut Tape<S>, geo: NodeId) -> Result<NodeId> {
        let gm = tape.value(geo);
        if gm.cols() != self.c1 {
            return Err(Error::dimension(
                "adapter_forward",
                format!("geo {}x{}", gm.rows(), gm.cols()),
                format!("W1 {}x{}", self.c1, self.hidden),
            ));
        }
        let w1 = tape.param(names::ADAPTER_W1, self.get(names::ADAPTER_W1)?.clone());
        let b1 = tape.param(names::ADAPTER_B1, self.get(names::ADAPTER_B1)?.clone());
        let w2 = tape.param(names::ADAPTER_W2, self.get(names::ADAPTER_W2)?.clone());
        let b2 = tape.param(names::ADAPTER_B2, self.get(names::ADAPTER_B2)?.clone());
        let h = tape.matmul(geo, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_bias(o, b2)
    }

    /// Adapter forward without gradient bookkeeping.
    pub fn adapter_eval(&self, geo: &Matrix<S>) -> Result<Matrix<S>> {
        let mut tape = Tape::new();
        let g = tape.constant(geo.clone());
        let out = self.adapter_forward(&mut tape, g)?;
        Ok(tape.value(out).clone())
    }

    /// Uncertainty head, recorded on the tape: `sigmoid(x · w + b)`.
    pub fn uncertainty_forward(&self, tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
        let xm = tape.value(x);
        if xm.cols() != self.c1 + self.c {
            return Err(Error::dimension(
                "uncertainty_forward",
                format!("x {}x{}", xm.rows(), xm.cols()),
                format!("w {}x1", self.c1 + self.c),
            ));
        }
        let w = tape.param(names::UNCERTAINTY_W, self.get(names::UNCERTAINTY_W)?.clone());
        let b = tape.param(names::UNCERTAINTY_B, self.get(names::UNCERTAINTY_B)?.clone());
        let o = tape.matmul(x, w)?;
        let o = tape.add_bias(o, b)?;
        Ok(tape.sigmoid(o))
    }

    /// Mask head, recorded on the tape: `x · W + b`.
    pub fn mask_forward(&self, tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
        let xm = tape.value(x);
        if xm.cols() != self.c {
            return Err(Error::dimension(
                "mask_forward",
                format!("x {}x{}", xm.rows(), xm.cols()),
                format!("W {}x{}", self.c, self.c),
            ));
        }
        let w = tape.param(names::MASK_W, self.get(names::MASK_W)?.clone());
        let b = tape.param(names::MASK_B, self.get(names::MASK_B)?.clone());
        let o = tape.matmul(x, w)?;
        tape.add_bias(o, b)
    }

    /// Serialize to the GGPK checkpoint format: magic, version, then per
    /// tensor (name length u32, name bytes, rows u32, cols u32, f64 LE
    /// values), tensors in sorted-name order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.c1 as u32).to_le_bytes());
        buf.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        buf.extend_from_slice(&(self.c as u32).to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.data() {
                buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut pos)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let c1 = read_u32(&mut pos)? as usize;
        let hidden = read_u32(&mut pos)? as usize;
        let c = read_u32(&mut pos)? as usize;
        let count = read_u32(&mut pos)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
            let rows = read_u32(&mut pos)? as usize;
            let cols = read_u32(&mut pos)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
                data.push(S::from_f64_lossy(v));
            }
            tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        Ok(ParamStore {
            tensors,
            c1,
            hidden,
            c,
        })
    }
}
