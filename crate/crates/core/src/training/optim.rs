//! AdamW with decoupled weight decay and a per-epoch learning-rate decay.

use std::io::{Read, Write};
use std::path::Path;

use vnsc_tensor::{ParamStore, Tensor};

use crate::error::{Result, VnscError};

pub const OPTS_MAGIC: &[u8; 8] = b"VNSCOPTS";
pub const OPTS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate factor applied after every epoch.
    pub epoch_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            epoch_decay: 0.999,
        }
    }
}

/// Step count, epoch and moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub epoch: u64,
    /// `m.<param>` and `v.<param>` for every parameter updated so far.
    moments: ParamStore,
}

impl OptimizerState {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            epoch: 0,
            moments: ParamStore::new(),
        }
    }

    /// `lr · epoch_decay^epoch`
    pub fn learning_rate(&self) -> f64 {
        self.cfg.lr * self.cfg.epoch_decay.powi(self.epoch as i32)
    }

    pub fn end_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn moment(&self, kind: char, name: &str) -> Option<&Tensor<f32>> {
        self.moments.get(&format!("{kind}.{name}")).map(|p| &p.tensor)
    }

    /// One update of every parameter in `grads`; others are left alone.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[(String, Tensor<f64>)]) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let lr = self.learning_rate();
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, g) in grads {
            let (m_key, v_key) = (format!("m.{name}"), format!("v.{name}"));
            if !self.moments.contains(&m_key) {
                self.moments.insert(m_key.clone(), Tensor::zeros(g.shape()), true)?;
                self.moments.insert(v_key.clone(), Tensor::zeros(g.shape()), true)?;
            }
            let mut m = self.moments.tensor(&m_key)?.clone();
            let mut v = self.moments.tensor(&v_key)?.clone();
            let p = params.tensor_mut(name)?;
            if p.shape() != g.shape() {
                return Err(VnscError::Config(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let m_new = c.beta1 * *mv as f64 + (1.0 - c.beta1) * gv;
                let v_new = c.beta2 * *vv as f64 + (1.0 - c.beta2) * gv * gv;
                *mv = m_new as f32;
                *vv = v_new as f32;
                let p_old = *pv as f64;
                let adam = (m_new / bc1) / ((v_new / bc2).sqrt() + c.eps);
                *pv = (p_old - lr * (adam + c.weight_decay * p_old)) as f32;
            }
            self.moments.set(&m_key, m)?;
            self.moments.set(&v_key, v)?;
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(OPTS_MAGIC)?;
        w.write_all(&OPTS_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        let c = self.cfg;
        for x in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.epoch_decay] {
            w.write_all(&x.to_le_bytes())?;
        }
        self.moments.write_to(&mut w)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 12 + 16 + 48];
        r.read_exact(&mut head)
            .map_err(|_| VnscError::Format("optimizer file shorter than its header".into()))?;
        if &head[..8] != OPTS_MAGIC {
            return Err(VnscError::Format("not a VNSCOPTS file".into()));
        }
        let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
        if version != OPTS_VERSION {
            return Err(VnscError::Format(format!("unsupported optimizer file version {version}")));
        }
        let u64_at = |i: usize| u64::from_le_bytes(head[i..i + 8].try_into().expect("8 bytes"));
        let f64_at = |i: usize| f64::from_le_bytes(head[i..i + 8].try_into().expect("8 bytes"));
        let cfg = AdamWConfig {
            lr: f64_at(28),
            beta1: f64_at(36),
            beta2: f64_at(44),
            eps: f64_at(52),
            weight_decay: f64_at(60),
            epoch_decay: f64_at(68),
        };
        Ok(Self {
            cfg,
            step: u64_at(12),
            epoch: u64_at(20),
            moments: ParamStore::read_from(r)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
