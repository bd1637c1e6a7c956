//! Adapter and LoRA blocks, with and without the initial-residual mix.
//!
//! Tape-level functions live in [`ops`]; the `forward*` methods on the
//! module structs run the same code on a scratch tape and return plain
//! matrices.

use rand::Rng;

use crate::error::{LabError, Result};
use crate::numcore::{Activation, Matrix, Tape, Var};

/// Serial bottleneck adapter `h + f(h W_down) W_up`, no biases.
#[derive(Debug, Clone)]
pub struct AdapterModule {
    /// `d x r`
    pub down: Matrix,
    /// `r x d`
    pub up: Matrix,
}

/// Low-rank update `s · h W_down W_up` added to a frozen projection.
#[derive(Debug, Clone)]
pub struct LoraModule {
    /// `d_in x r`
    pub down: Matrix,
    /// `r x d_out`, zero at construction
    pub up: Matrix,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub down: Var,
    pub up: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub down: Var,
    pub up: Var,
}

impl AdapterModule {
    /// Gaussian down projection, zero up projection.
    pub fn init<R: Rng + ?Sized>(d: usize, r: usize, std: f64, rng: &mut R) -> Self {
        Self {
            down: Matrix::randn(d, r, std, rng).with_grad(),
            up: Matrix::zeros(r, d).with_grad(),
        }
    }

    pub fn from_weights(down: Matrix, up: Matrix) -> Result<Self> {
        if down.cols() != up.rows() || down.rows() != up.cols() {
            return Err(LabError::Shape {
                op: "adapter weights",
                lhs: down.shape(),
                rhs: up.shape(),
            });
        }
        Ok(Self {
            down: down.with_grad(),
            up: up.with_grad(),
        })
    }

    pub fn width(&self) -> usize {
        self.down.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            down: tape.leaf(&self.down),
            up: tape.leaf(&self.up),
        }
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }

    pub fn forward(&self, h: &Matrix, act: Activation) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let h = tape.leaf(h);
        let out = ops::adapter_forward(&mut tape, vars, h, act)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_sibo(&self, h: &Matrix, h0: &Matrix, lambda: f64, act: Activation) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let (h, h0) = (tape.leaf(h), tape.leaf(h0));
        let out = ops::adapter_sibo_forward(&mut tape, vars, h, h0, lambda, act)?;
        Ok(tape.value(out).clone())
    }
}

impl LoraModule {
    /// Gaussian down projection, zero up projection, so the update starts at zero.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, r: usize, std: f64, rng: &mut R) -> Self {
        Self {
            down: Matrix::randn(d_in, r, std, rng).with_grad(),
            up: Matrix::zeros(r, d_out).with_grad(),
        }
    }

    pub fn from_weights(down: Matrix, up: Matrix) -> Result<Self> {
        if down.cols() != up.rows() {
            return Err(LabError::Shape {
                op: "lora weights",
                lhs: down.shape(),
                rhs: up.shape(),
            });
        }
        Ok(Self {
            down: down.with_grad(),
            up: up.with_grad(),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> LoraVars {
        LoraVars {
            down: tape.leaf(&self.down),
            up: tape.leaf(&self.up),
        }
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }

    /// `ΔW = W_down W_up`.
    pub fn delta(&self) -> Result<Matrix> {
        self.down.matmul(&self.up)
    }

    /// `W + s ΔW`, used only as a reference; the forward pass never builds it.
    pub fn merged(&self, w: &Matrix, s: f64) -> Result<Matrix> {
        w.affine_mix(&self.delta()?, 1.0, s)
    }

    pub fn forward(&self, w: &Matrix, h: &Matrix, s: f64) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let (w, h) = (tape.leaf(w), tape.leaf(h));
        let out = ops::lora_forward(&mut tape, vars, w, h, s)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_sibo(
        &self,
        w: &Matrix,
        h: &Matrix,
        h0: &Matrix,
        lambda: f64,
        s: f64,
        frozen_path: bool,
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let (w, h, h0) = (tape.leaf(w), tape.leaf(h), tape.leaf(h0));
        let out = ops::lora_sibo_forward(&mut tape, vars, w, h, h0, lambda, s, frozen_path)?;
        Ok(tape.value(out).clone())
    }
}

/// `(1 − λ) h + λ h0`, applied row-wise. At `λ = 0` returns `h` unchanged,
/// signed zeros included.
pub fn sibo_mix(h: &Matrix, h0: &Matrix, lambda: f64) -> Result<Matrix> {
    check_lambda(lambda)?;
    let mixed = h.affine_mix(h0, 1.0 - lambda, lambda)?;
    Ok(if lambda == 0.0 { h.clone() } else { mixed })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(LabError::config(format!("lambda {lambda} must lie in [0, 1)")))
    }
}

pub mod ops {
    //! Recording versions of the PEFT forward rules.

    use super::*;

    /// At `λ = 0` this records nothing and returns `h`, so the graph and its
    /// gradient accumulation order are exactly those of the vanilla module.
    pub fn sibo_mix(tape: &mut Tape, h: Var, h0: Var, lambda: f64) -> Result<Var> {
        check_lambda(lambda)?;
        if lambda == 0.0 {
            if tape.value(h).shape() != tape.value(h0).shape() {
                return Err(LabError::Shape {
                    op: "sibo_mix",
                    lhs: tape.value(h).shape(),
                    rhs: tape.value(h0).shape(),
                });
            }
            return Ok(h);
        }
        tape.affine_mix(h, h0, 1.0 - lambda, lambda)
    }

    /// `h + f(h W_down) W_up`
    pub fn adapter_forward(tape: &mut Tape, m: AdapterVars, h: Var, act: Activation) -> Result<Var> {
        let z = tape.matmul(h, m.down)?;
        let z = tape.nonlinearity(z, act)?;
        let z = tape.matmul(z, m.up)?;
        tape.add(h, z)
    }

    /// `h̃ + f(h̃ W_down) W_up` with `h̃ = (1 − λ) h + λ h0`; the skip path carries `h̃`.
    pub fn adapter_sibo_forward(
        tape: &mut Tape,
        m: AdapterVars,
        h: Var,
        h0: Var,
        lambda: f64,
        act: Activation,
    ) -> Result<Var> {
        let mixed = sibo_mix(tape, h, h0, lambda)?;
        adapter_forward(tape, m, mixed, act)
    }

    /// `h W + s (h W_down) W_up`, without forming `W + s ΔW`.
    pub fn lora_forward(tape: &mut Tape, m: LoraVars, w: Var, h: Var, s: f64) -> Result<Var> {
        lora_split(tape, m, w, h, h, s)
    }

    /// Frozen path sees `h` (or `h̃` when `frozen_path`); the low-rank path sees `h̃`.
    #[allow(clippy::too_many_arguments)]
    pub fn lora_sibo_forward(
        tape: &mut Tape,
        m: LoraVars,
        w: Var,
        h: Var,
        h0: Var,
        lambda: f64,
        s: f64,
        frozen_path: bool,
    ) -> Result<Var> {
        let mixed = sibo_mix(tape, h, h0, lambda)?;
        let frozen_in = if frozen_path { mixed } else { h };
        lora_split(tape, m, w, frozen_in, mixed, s)
    }

    fn lora_split(tape: &mut Tape, m: LoraVars, w: Var, frozen_in: Var, low_in: Var, s: f64) -> Result<Var> {
        let base = tape.matmul(frozen_in, w)?;
        let low = tape.matmul(low_in, m.down)?;
        let low = tape.matmul(low, m.up)?;
        tape.affine_mix(base, low, 1.0, s)
    }
}
