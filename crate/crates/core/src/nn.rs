//! Small layer building blocks over the autograd tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Row-vector affine map `x·W (+ b)`, with an optional low-rank adapter
/// `scale · (x·Aᵀ)·Bᵀ`. `W` is stored `d_in × d_out`; the adapter factors
/// are stored transposed (`Aᵀ: d_in × r`, `Bᵀ: r × d_out`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<AdapterIds>,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdapterIds {
    pub a_t: ParamId,
    pub b_t: ParamId,
    pub scale: f64,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = store.normal(format!("{name}.weight"), group, (d_in, d_out), std, rng)?;
        let bias = if bias {
            Some(store.zeros(format!("{name}.bias"), group, (1, d_out))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            adapter: None,
            d_in,
            d_out,
        })
    }

    /// Attach a low-rank adapter: `A` small random, `B` zero.
    pub fn attach_adapter<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<()> {
        let std = 1.0 / (self.d_in as f64).sqrt();
        let a_t = store.normal(format!("{name}.lora_a"), ParamGroup::Lora, (self.d_in, rank), std, rng)?;
        let b_t = store.zeros(format!("{name}.lora_b"), ParamGroup::Lora, (rank, self.d_out))?;
        self.adapter = Some(AdapterIds { a_t, b_t, scale });
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, use_adapter: bool) -> Var {
        let w = tape.param(self.weight);
        let mut y = tape.matmul(x, w);
        if let (true, Some(ad)) = (use_adapter, self.adapter) {
            let a = tape.param(ad.a_t);
            let b = tape.param(ad.b_t);
            let low = tape.matmul(x, a);
            let delta = tape.matmul(low, b);
            let delta = tape.scale(delta, ad.scale);
            y = tape.add(y, delta);
        }
        if let Some(b) = self.bias {
            let b = tape.param(b);
            y = tape.add_row(y, b);
        }
        y
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(format!("{name}.gain"), group, (1, d))?,
            bias: store.zeros(format!("{name}.bias"), group, (1, d))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer perceptron `Linear → tanh → Linear`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), group, d_in, d_hidden, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), group, d_hidden, d_out, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(tape, x, false);
        let h = tape.tanh(h);
        self.out.forward(tape, h, false)
    }
}
