//! Generalized delta-rule recurrence of RWKV-7.
//!
//! Per token the `d_v × d_k` state evolves as
//!
//! ```text
//! S_t = S_{t-1} · M_t + v_tᵀ k̃_t
//! M_t = diag(w_t) − κ̂_tᵀ (a_t ⊙ κ̂_t)
//! ```
//!
//! and the layer reads it out as `y_t = S_t · r_t`. [`transition_matrix`]
//! materializes `M_t`; the step itself applies it in rank-one form so a step
//! costs `O(d_v·d_k)` instead of `O(d_v·d_k²)`.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix, Vector};

/// Gate vectors for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Rwkv7Inputs<T> {
    /// Decay, each component in (0, 1].
    pub w: Vector<T>,
    /// In-context learning rate, each component in [0, 1].
    pub a: Vector<T>,
    /// Removal key, unit L2 norm.
    pub kappa_hat: Vector<T>,
    /// Replacement key.
    pub k_tilde: Vector<T>,
    pub v: Vector<T>,
    /// Receptance used by the readout.
    pub r: Vector<T>,
}

impl<T: Scalar> Rwkv7Inputs<T> {
    /// Validates ranges and dimensions and L2-normalizes the removal key.
    pub fn new(
        w: Vector<T>,
        a: Vector<T>,
        kappa: Vector<T>,
        k_tilde: Vector<T>,
        v: Vector<T>,
        r: Vector<T>,
    ) -> Result<Self> {
        let d_k = w.dim();
        for (name, dim) in [
            ("a", a.dim()),
            ("kappa", kappa.dim()),
            ("k_tilde", k_tilde.dim()),
            ("r", r.dim()),
        ] {
            if dim != d_k {
                return Err(shape_err("Rwkv7Inputs::new", format!("{name} of dim {d_k}"), dim));
            }
        }
        if let Some(bad) = w.iter().find(|&&x| !(x > T::zero() && x <= T::one())) {
            return Err(Error::Input(format!("decay component {bad} outside (0, 1]")));
        }
        if let Some(bad) = a.iter().find(|&&x| !(x >= T::zero() && x <= T::one())) {
            return Err(Error::Input(format!("learning-rate component {bad} outside [0, 1]")));
        }
        let kappa_hat = l2_normalize(kappa)?;
        Ok(Rwkv7Inputs {
            w,
            a,
            kappa_hat,
            k_tilde,
            v,
            r,
        })
    }

    /// Maps raw linear-projection outputs onto the gate ranges: sigmoid for
    /// the decay and the learning rate, L2 normalization for the removal key.
    pub fn from_preactivations(w_pre: &[T], a_pre: &[T], kappa: &[T], k_tilde: &[T], v: &[T], r: &[T]) -> Result<Self> {
        let tiny = T::min_positive_value();
        let w: Vec<T> = w_pre.iter().map(|&x| sigmoid(x).max(tiny)).collect();
        let a: Vec<T> = a_pre.iter().map(|&x| sigmoid(x)).collect();
        Self::new(w.into(), a.into(), kappa.into(), k_tilde.into(), v.into(), r.into())
    }

    pub fn d_k(&self) -> usize {
        self.w.dim()
    }

    pub fn d_v(&self) -> usize {
        self.v.dim()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn l2_normalize<T: Scalar>(v: Vector<T>) -> Result<Vector<T>> {
    let norm = v.norm();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::Input(format!("removal key has norm {norm}; cannot normalize")));
    }
    let mut v = v;
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(v)
}

/// Recurrent state `S` of one layer, shape `d_v × d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rwkv7State<T> {
    pub s: Matrix<T>,
}

impl<T: Scalar> Rwkv7State<T> {
    pub fn zeros(d_v: usize, d_k: usize) -> Self {
        Rwkv7State {
            s: Matrix::zeros(d_v, d_k),
        }
    }

    pub fn d_v(&self) -> usize {
        self.s.rows()
    }

    pub fn d_k(&self) -> usize {
        self.s.cols()
    }

    /// Applies one token in place.
    pub fn step(&mut self, inputs: &Rwkv7Inputs<T>) -> Result<()> {
        let (d_v, d_k) = self.s.shape();
        if inputs.d_k() != d_k || inputs.d_v() != d_v {
            return Err(shape_err(
                "state_step",
                format!("inputs with d_v={d_v}, d_k={d_k}"),
                format!("d_v={}, d_k={}", inputs.d_v(), inputs.d_k()),
            ));
        }
        let removal: Vec<T> = inputs
            .a
            .iter()
            .zip(inputs.kappa_hat.iter())
            .map(|(&a, &k)| a * k)
            .collect();
        for row in 0..d_v {
            let s_row = self.s.row_mut(row);
            // (S κ̂)[row]: the part of the state aligned with the removal key.
            let aligned = dot(s_row, &inputs.kappa_hat);
            let v = inputs.v[row];
            for c in 0..d_k {
                s_row[c] = s_row[c] * inputs.w[c] - aligned * removal[c] + v * inputs.k_tilde[c];
            }
        }
        Ok(())
    }

    /// `y = S · r`.
    pub fn readout(&self, r: &[T]) -> Result<Vector<T>> {
        self.s.matvec(r).map_err(|_| shape_err("readout", self.d_k(), r.len()))
    }
}

/// Dense transition matrix `diag(w) − κ̂ᵀ(a ⊙ κ̂)`, `d_k × d_k`.
pub fn transition_matrix<T: Scalar>(w: &[T], kappa_hat: &[T], a: &[T]) -> Result<Matrix<T>> {
    let d = w.len();
    if kappa_hat.len() != d || a.len() != d {
        return Err(shape_err(
            "transition_matrix",
            format!("three vectors of dim {d}"),
            format!("kappa_hat {}, a {}", kappa_hat.len(), a.len()),
        ));
    }
    Ok(Matrix::from_fn(d, d, |i, j| {
        let diag = if i == j { w[i] } else { T::zero() };
        diag - kappa_hat[i] * (a[j] * kappa_hat[j])
    }))
}

/// One state transition, returning the new state.
pub fn state_step<T: Scalar>(prev: &Rwkv7State<T>, inputs: &Rwkv7Inputs<T>) -> Result<Rwkv7State<T>> {
    let mut next = prev.clone();
    next.step(inputs)?;
    Ok(next)
}

pub fn readout<T: Scalar>(state: &Rwkv7State<T>, r: &[T]) -> Result<Vector<T>> {
    state.readout(r)
}

/// Runs the recurrence over `seq`, returning every readout and the final
/// state.
pub fn rwkv7_forward<T: Scalar>(
    seq: &[Rwkv7Inputs<T>],
    init: Rwkv7State<T>,
) -> Result<(Vec<Vector<T>>, Rwkv7State<T>)> {
    let mut outputs = Vec::with_capacity(seq.len());
    let state = rwkv7_forward_with(seq.iter().cloned(), init, |_, y| outputs.push(y))?;
    Ok((outputs, state))
}

/// Streaming form of [`rwkv7_forward`]: inputs are pulled lazily and each
/// readout is handed to `sink` instead of being stored, so memory does not
/// grow with sequence length.
pub fn rwkv7_forward_with<T: Scalar>(
    seq: impl IntoIterator<Item = Rwkv7Inputs<T>>,
    init: Rwkv7State<T>,
    mut sink: impl FnMut(usize, Vector<T>),
) -> Result<Rwkv7State<T>> {
    let mut state = init;
    let mut n = 0;
    for (t, inputs) in seq.into_iter().enumerate() {
        state.step(&inputs)?;
        sink(t, state.readout(&inputs.r)?);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("rwkv7_forward"));
    }
    Ok(state)
}
