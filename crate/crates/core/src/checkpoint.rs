//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "FCK1" | version u32 | step u64 | config hash [u8; 8] | flags u32
//! layout(F) | params(F) | ema decay f64 | ema(F) | [adam(F)]
//! [layout(G) | params(G) | adam(G)]
//! ```
//!
//! A layout is seven `u32`/`f64` size fields followed by one byte per slot;
//! every float array is prefixed by its `u64` length. Flag bit 0 marks the
//! optimiser state of `F`, bit 1 the auxiliary network.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Activation, EmaShadow, Layout, ModelParams, SlotKind};
use crate::trainer::{AuxState, OptimizerState, TrainConfig, TrainState};

pub const MAGIC: [u8; 4] = *b"FCK1";
pub const VERSION: u32 = 1;

const HAS_OPT: u32 = 1;
const HAS_AUX: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct AuxCheckpoint {
    pub layout: Layout,
    pub params: Vec<f64>,
    pub opt: OptimizerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: [u8; 8],
    pub layout: Layout,
    pub params: Vec<f64>,
    pub ema_decay: f64,
    pub ema: Vec<f64>,
    pub opt: Option<OptimizerState>,
    pub aux: Option<AuxCheckpoint>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config_hash: [u8; 8]) -> Self {
        Self {
            step: state.step,
            config_hash,
            layout: state.params.layout().clone(),
            params: state.params.flat().to_vec(),
            ema_decay: state.ema.decay,
            ema: state.ema.flat.clone(),
            opt: Some(state.opt.clone()),
            aux: state.aux.as_ref().map(|a| AuxCheckpoint {
                layout: a.params.layout().clone(),
                params: a.params.flat().to_vec(),
                opt: a.opt.clone(),
            }),
        }
    }

    /// Rebuilds a training state that continues from this checkpoint.
    pub fn into_state(self, config: &TrainConfig) -> Result<TrainState> {
        let params = ModelParams::from_flat(self.layout, self.params)?;
        let ema = EmaShadow::from_parts(self.ema, self.ema_decay);
        let opt = self.opt.unwrap_or_else(|| OptimizerState::new(params.len()));
        let aux = match self.aux {
            Some(a) => Some(AuxState { params: ModelParams::from_flat(a.layout, a.params)?, opt: a.opt }),
            None => None,
        };
        Ok(TrainState::from_parts(config, self.step, params, ema, opt, aux))
    }

    /// The EMA shadow as inference parameters.
    pub fn ema_params(&self) -> Result<ModelParams<f64>> {
        ModelParams::from_flat(self.layout.clone(), self.ema.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.u64(self.step);
        w.0.extend_from_slice(&self.config_hash);
        let flags = if self.opt.is_some() { HAS_OPT } else { 0 } | if self.aux.is_some() { HAS_AUX } else { 0 };
        w.u32(flags);
        w.layout(&self.layout);
        w.floats(&self.params);
        w.f64(self.ema_decay);
        w.floats(&self.ema);
        if let Some(o) = &self.opt {
            w.opt(o);
        }
        if let Some(a) = &self.aux {
            w.layout(&a.layout);
            w.floats(&a.params);
            w.opt(&a.opt);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let step = r.u64()?;
        let mut config_hash = [0u8; 8];
        config_hash.copy_from_slice(r.take(8)?);
        let flags = r.u32()?;
        if flags & !(HAS_OPT | HAS_AUX) != 0 {
            return Err(Error::Checkpoint(format!("unknown flag bits {flags:#x}")));
        }
        let layout = r.layout()?;
        let params = r.floats()?;
        let ema_decay = r.f64()?;
        let ema = r.floats()?;
        if params.len() != layout.param_count() || ema.len() != params.len() {
            return Err(Error::Checkpoint("parameter count does not match layout".into()));
        }
        let opt = if flags & HAS_OPT != 0 { Some(r.opt(params.len())?) } else { None };
        let aux = if flags & HAS_AUX != 0 {
            let layout = r.layout()?;
            let params = r.floats()?;
            if params.len() != layout.param_count() {
                return Err(Error::Checkpoint("auxiliary parameter count does not match layout".into()));
            }
            let opt = r.opt(params.len())?;
            Some(AuxCheckpoint { layout, params, opt })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { step, config_hash, layout, params, ema_decay, ema, opt, aux })
    }
}

pub fn checkpoint_save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    crate::io::write_atomic(path, &ckpt.to_bytes())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
    fn layout(&mut self, l: &Layout) {
        for n in [l.dim, l.hidden, l.depth, l.embed_dim, l.embed_hidden] {
            self.u32(n as u32);
        }
        self.f64(l.max_freq);
        self.u32(l.num_classes as u32);
        self.u32(l.slots.len() as u32);
        self.0.extend(l.slots.iter().map(|s| s.code()));
    }
    fn opt(&mut self, o: &OptimizerState) {
        self.u64(o.step);
        self.floats(&o.m);
        self.floats(&o.v);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("file truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::Checkpoint(format!("non-finite value at byte {}", self.pos - 8)));
        }
        Ok(v)
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::Checkpoint(format!("array of {n} values overruns the file")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn layout(&mut self) -> Result<Layout> {
        let mut sizes = [0usize; 5];
        for s in &mut sizes {
            *s = self.u32()? as usize;
        }
        let max_freq = self.f64()?;
        let num_classes = self.u32()? as usize;
        let nslots = self.u32()? as usize;
        let slots = self
            .take(nslots)?
            .iter()
            .map(|&c| SlotKind::from_code(c).ok_or_else(|| Error::Checkpoint(format!("unknown slot code {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let layout = Layout {
            dim: sizes[0],
            hidden: sizes[1],
            depth: sizes[2],
            embed_dim: sizes[3],
            embed_hidden: sizes[4],
            max_freq,
            num_classes,
            slots,
            activation: Activation::Silu,
        };
        layout.validate().map_err(|e| Error::Checkpoint(format!("invalid layout: {e}")))?;
        Ok(layout)
    }
    fn opt(&mut self, n: usize) -> Result<OptimizerState> {
        let step = self.u64()?;
        let m = self.floats()?;
        let v = self.floats()?;
        if m.len() != n || v.len() != n {
            return Err(Error::Checkpoint("optimizer state length does not match parameters".into()));
        }
        Ok(OptimizerState { m, v, step })
    }
}
