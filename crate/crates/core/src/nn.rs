//! Dense building blocks with hand-written reverse-mode gradients.
//!
//! Token matrices are row-major `(tokens, features)`; a linear layer is
//! `x · W` with `W` of shape `(in, out)`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Saved forward state of one scaled dot-product attention call.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub probs: Array2<f64>,
    pub scale: f64,
}

/// `softmax(Q Kᵀ / √d) V` for `Q: (n, d)`, `K: (m, d)`, `V: (m, e)`.
pub fn attention_forward(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let logits = q.dot(&k.t()) * scale;
    let probs = softmax_rows(&logits);
    let out = probs.dot(v);
    (out, AttentionCache { probs, scale })
}

/// Gradients `(dQ, dK, dV)` of [`attention_forward`] given `d_out`.
pub fn attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    cache: &AttentionCache,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let a = &cache.probs;
    let d_v = a.t().dot(d_out);
    let d_a = d_out.dot(&v.t());
    // softmax Jacobian, row by row: dL = A ⊙ (dA − Σ_j dA_j A_j)
    let row_dot = (&d_a * a).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_logits = a * &(&d_a - &row_dot);
    let d_q = d_logits.dot(k) * cache.scale;
    let d_k = d_logits.t().dot(q) * cache.scale;
    (d_q, d_k, d_v)
}

/// Fixed sinusoidal embedding; row `t` encodes step `t`.
pub fn sinusoidal_table(rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |(t, j)| {
        let i = (j / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            (t as f64 * freq).sin()
        } else {
            (t as f64 * freq).cos()
        }
    })
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

pub fn row_sum(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

/// Borrowed view of one named parameter tensor.
pub struct ParamRef<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: &'static str,
    pub data: &'a mut [f64],
}

/// A fixed, ordered set of named tensors. Gradients use the same type.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<ParamRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<ParamMut<'_>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// `self += alpha * other`, tensor by tensor.
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data.iter_mut().zip(s.data) {
                *d += alpha * v;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Flat value at global index `i` (tensor order, then row-major).
    fn get_flat(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    fn set_flat(&mut self, mut i: usize, value: f64) {
        for t in self.tensors_mut() {
            if i < t.data.len() {
                t.data[i] = value;
                return;
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }
}

/// Declares a struct of `ndarray` tensors and implements [`Parameters`]
/// over its fields in declaration order.
macro_rules! parameter_struct {
    ($(#[$meta:meta])* pub struct $name:ident { $($(#[$fmeta:meta])* pub $field:ident : $ty:ty),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: $ty),*
        }

        impl $crate::nn::Parameters for $name {
            fn tensors(&self) -> Vec<$crate::nn::ParamRef<'_>> {
                vec![$($crate::nn::ParamRef {
                    name: stringify!($field),
                    shape: self.$field.shape().to_vec(),
                    data: self.$field.as_slice().expect("standard layout"),
                }),*]
            }

            fn tensors_mut(&mut self) -> Vec<$crate::nn::ParamMut<'_>> {
                vec![$($crate::nn::ParamMut {
                    name: stringify!($field),
                    data: self.$field.as_slice_mut().expect("standard layout"),
                }),*]
            }
        }
    };
}

pub(crate) use parameter_struct;
