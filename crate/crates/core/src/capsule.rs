//! Vector-capsule classification heads.
//!
//! A head reshapes the final feature maps into j capsules of dimension n
//! (three reshaping methods), transforms each (input capsule, class) pair,
//! sums the transformed capsules per class with uniform coupling (no
//! routing), and reads out one score per class as the Euclidean norm of the
//! class capsule.
//!
//! Three transforms are provided. The homogeneous vector-capsule (HVC)
//! transform multiplies each pair elementwise with a weight vector of the
//! same dimension. The two matrix transforms are the classical baselines:
//! a full transformation matrix per pair, and a square-matrix product that
//! reshapes each capsule to sqrt(n) x sqrt(n).

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Fill, Scalar, Tensor};

/// How final feature maps become capsules.
///
/// - `A`: each spatial position's channels split into groups of n, one
///   capsule per group;
/// - `B`: one capsule per spatial position holding all channels (n = C);
/// - `C`: one capsule per feature map holding all positions (n = H*W).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsMethod {
    A,
    B,
    C,
}

impl CapsMethod {
    pub fn letter(&self) -> &'static str {
        match self {
            CapsMethod::A => "a",
            CapsMethod::B => "b",
            CapsMethod::C => "c",
        }
    }
}

/// Classification head kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Flatten + fully connected layer (the baseline, not a capsule head).
    Fc,
    /// Homogeneous vector capsules: per-pair Hadamard weight vectors.
    Hvc,
    /// Per-pair full transformation matrix (n_in -> n_out).
    MatrixFull,
    /// Per-pair square-matrix transform on sqrt(n) x sqrt(n) capsules.
    MatrixSquare,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Fc => "fc",
            HeadKind::Hvc => "hvc",
            HeadKind::MatrixFull => "matrix-full",
            HeadKind::MatrixSquare => "matrix-square",
        }
    }
}

/// An ordered set of j capsules of dimension n.
///
/// `values` is `[j, n]` for a single sample or `[N, j, n]` for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleGrid<T> {
    pub j: usize,
    pub n: usize,
    pub values: Tensor<T>,
}

fn integer_sqrt(n: usize) -> Option<usize> {
    let k = (n as f64).sqrt().round() as usize;
    if k * k == n {
        Some(k)
    } else {
        None
    }
}

/// The per-sample index permutation realizing a reshaping method:
/// `capsules_flat[i] = maps_flat[perm[i]]`. Returns `(j, n, perm)`.
pub fn caps_perm(
    h: usize,
    w: usize,
    c: usize,
    method: CapsMethod,
    n: Option<usize>,
) -> Result<(usize, usize, Vec<usize>)> {
    let total = h * w * c;
    match method {
        CapsMethod::A => {
            let n = n.ok_or_else(|| Error::config("method A requires a capsule dimension"))?;
            if n == 0 || c % n != 0 {
                return Err(Error::config(format!(
                    "method A capsule dimension {n} does not divide {c} channels"
                )));
            }
            let groups = c / n;
            let j = h * w * groups;
            let mut perm = Vec::with_capacity(total);
            for pos in 0..h * w {
                for g in 0..groups {
                    for k in 0..n {
                        perm.push(pos * c + g * n + k);
                    }
                }
            }
            Ok((j, n, perm))
        }
        CapsMethod::B => {
            // One capsule per position over all channels: already the
            // row-major layout, so the permutation is the identity.
            Ok((h * w, c, (0..total).collect()))
        }
        CapsMethod::C => {
            let j = c;
            let n = h * w;
            let mut perm = Vec::with_capacity(total);
            for ch in 0..c {
                for pos in 0..h * w {
                    perm.push(pos * c + ch);
                }
            }
            Ok((j, n, perm))
        }
    }
}

/// Reshape final feature maps (`[H,W,C]` or `[N,H,W,C]`) into capsules.
/// The output values are a permutation of the input scalars.
pub fn reshape_to_capsules<T: Scalar>(
    maps: &Tensor<T>,
    method: CapsMethod,
    n: Option<usize>,
) -> Result<CapsuleGrid<T>> {
    let (shape, batch) = match maps.rank() {
        3 => (maps.shape().to_vec(), None),
        4 => (maps.shape()[1..].to_vec(), Some(maps.shape()[0])),
        r => {
            return Err(Error::shape(format!(
                "reshape_to_capsules wants rank 3 or 4 maps, got rank {r}"
            )))
        }
    };
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (j, n, perm) = caps_perm(h, w, c, method, n)?;
    let values = apply_perm(maps, &perm, batch.unwrap_or(1));
    let values = match batch {
        Some(b) => values.reshape(&[b, j, n])?,
        None => values.reshape(&[j, n])?,
    };
    Ok(CapsuleGrid { j, n, values })
}

/// Gather `out[s*block + i] = input[s*block + perm[i]]` for each sample s.
pub fn apply_perm<T: Scalar>(x: &Tensor<T>, perm: &[usize], samples: usize) -> Tensor<T> {
    let block = perm.len();
    let mut out = vec![T::zero(); samples * block];
    for s in 0..samples {
        let base = s * block;
        for (i, &p) in perm.iter().enumerate() {
            out[base + i] = x.data()[base + p];
        }
    }
    Tensor::new(vec![samples * block], out).expect("perm output shape")
}

/// Scatter gradient back through [`apply_perm`].
pub fn apply_perm_backward<T: Scalar>(grad: &Tensor<T>, perm: &[usize], samples: usize) -> Tensor<T> {
    let block = perm.len();
    let mut out = vec![T::zero(); samples * block];
    for s in 0..samples {
        let base = s * block;
        for (i, &p) in perm.iter().enumerate() {
            out[base + p] = grad.data()[base + i];
        }
    }
    Tensor::new(vec![samples * block], out).expect("perm output shape")
}

/// Weight tensor shape for one head kind.
pub fn head_weight_shape(kind: HeadKind, j: usize, n_in: usize, n_out: usize, y: usize) -> Result<Vec<usize>> {
    match kind {
        HeadKind::Hvc => Ok(vec![j, y, n_in]),
        HeadKind::MatrixFull => Ok(vec![j, y, n_out, n_in]),
        HeadKind::MatrixSquare => {
            let k = integer_sqrt(n_in).ok_or_else(|| {
                Error::config(format!(
                    "matrix-square head requires a perfect-square capsule dimension, got {n_in}"
                ))
            })?;
            Ok(vec![j, y, k, k])
        }
        HeadKind::Fc => Err(Error::config("fc head has no capsule weights")),
    }
}

/// Head weight init: normal(0, 1/sqrt(j)) so the uniform sum over j
/// capsules preserves activation scale.
pub fn init_head_weights<T: Scalar>(
    kind: HeadKind,
    j: usize,
    n_in: usize,
    n_out: usize,
    y: usize,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    let shape = head_weight_shape(kind, j, n_in, n_out, y)?;
    Tensor::create(
        &shape,
        Fill::Normal {
            mean: 0.0,
            std: 1.0 / (j as f64).sqrt(),
            rng,
        },
    )
}

fn caps_batch_dims<T: Scalar>(caps: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match caps.rank() {
        2 => Ok((1, caps.shape()[0], caps.shape()[1])),
        3 => Ok((caps.shape()[0], caps.shape()[1], caps.shape()[2])),
        r => Err(Error::shape(format!(
            "capsule tensor wants rank 2 or 3, got rank {r}"
        ))),
    }
}

/// Transform j input capsules into y class capsules under uniform coupling:
/// every (input capsule, class) pair is transformed by its own weights and
/// the j transformed capsules are summed per class.
pub fn capsule_transform_forward<T: Scalar>(
    kind: HeadKind,
    caps: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, j, n_in) = caps_batch_dims(caps)?;
    let batched = caps.rank() == 3;
    match kind {
        HeadKind::Hvc => {
            if weights.rank() != 3 || weights.shape()[0] != j || weights.shape()[2] != n_in {
                return Err(Error::shape(format!(
                    "hvc weights {:?} vs capsules j={j}, n={n_in}",
                    weights.shape()
                )));
            }
            let y = weights.shape()[1];
            let mut out = vec![T::zero(); b * y * n_in];
            let xd = caps.data();
            let wd = weights.data();
            for s in 0..b {
                for i in 0..j {
                    let xrow = &xd[(s * j + i) * n_in..(s * j + i + 1) * n_in];
                    for c in 0..y {
                        let wrow = &wd[(i * y + c) * n_in..(i * y + c + 1) * n_in];
                        let orow = &mut out[(s * y + c) * n_in..(s * y + c + 1) * n_in];
                        for k in 0..n_in {
                            orow[k] = orow[k] + wrow[k] * xrow[k];
                        }
                    }
                }
            }
            shape_out(out, batched, b, y, n_in)
        }
        HeadKind::MatrixFull => {
            if weights.rank() != 4 || weights.shape()[0] != j || weights.shape()[3] != n_in {
                return Err(Error::shape(format!(
                    "matrix-full weights {:?} vs capsules j={j}, n_in={n_in}",
                    weights.shape()
                )));
            }
            let y = weights.shape()[1];
            let n_out = weights.shape()[2];
            let mut out = vec![T::zero(); b * y * n_out];
            let xd = caps.data();
            let wd = weights.data();
            for s in 0..b {
                for i in 0..j {
                    let xrow = &xd[(s * j + i) * n_in..(s * j + i + 1) * n_in];
                    for c in 0..y {
                        let wbase = ((i * y + c) * n_out) * n_in;
                        let orow = &mut out[(s * y + c) * n_out..(s * y + c + 1) * n_out];
                        for r in 0..n_out {
                            let wrow = &wd[wbase + r * n_in..wbase + (r + 1) * n_in];
                            let mut acc = T::zero();
                            for m in 0..n_in {
                                acc = acc + wrow[m] * xrow[m];
                            }
                            orow[r] = orow[r] + acc;
                        }
                    }
                }
            }
            shape_out(out, batched, b, y, n_out)
        }
        HeadKind::MatrixSquare => {
            let k = integer_sqrt(n_in).ok_or_else(|| {
                Error::config(format!(
                    "matrix-square transform requires a perfect-square capsule dimension, got {n_in}"
                ))
            })?;
            if weights.rank() != 4
                || weights.shape()[0] != j
                || weights.shape()[2] != k
                || weights.shape()[3] != k
            {
                return Err(Error::shape(format!(
                    "matrix-square weights {:?} vs capsules j={j}, sqrt(n)={k}",
                    weights.shape()
                )));
            }
            let y = weights.shape()[1];
            let mut out = vec![T::zero(); b * y * n_in];
            let xd = caps.data();
            let wd = weights.data();
            for s in 0..b {
                for i in 0..j {
                    // Capsule reshaped row-major to k x k; weight matrix on
                    // the left: out[r,t] += sum_q w[r,q] * x[q,t].
                    let xbase = (s * j + i) * n_in;
                    for c in 0..y {
                        let wbase = (i * y + c) * n_in;
                        let obase = (s * y + c) * n_in;
                        for r in 0..k {
                            for t in 0..k {
                                let mut acc = T::zero();
                                for q in 0..k {
                                    acc = acc + wd[wbase + r * k + q] * xd[xbase + q * k + t];
                                }
                                out[obase + r * k + t] = out[obase + r * k + t] + acc;
                            }
                        }
                    }
                }
            }
            shape_out(out, batched, b, y, n_in)
        }
        HeadKind::Fc => Err(Error::config("fc head is not a capsule transform")),
    }
}

fn shape_out<T: Scalar>(data: Vec<T>, batched: bool, b: usize, y: usize, n: usize) -> Result<Tensor<T>> {
    if batched {
        Tensor::new(vec![b, y, n], data)
    } else {
        debug_assert_eq!(b, 1);
        Tensor::new(vec![y, n], data)
    }
}

/// Gradients of [`capsule_transform_forward`]: returns (dcaps, dweights).
pub fn capsule_transform_backward<T: Scalar>(
    kind: HeadKind,
    caps: &Tensor<T>,
    weights: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, j, n_in) = caps_batch_dims(caps)?;
    let mut dcaps = vec![T::zero(); caps.len()];
    let mut dw = vec![T::zero(); weights.len()];
    let xd = caps.data();
    let wd = weights.data();
    let gd = grad.data();
    match kind {
        HeadKind::Hvc => {
            let y = weights.shape()[1];
            for s in 0..b {
                for i in 0..j {
                    let xbase = (s * j + i) * n_in;
                    for c in 0..y {
                        let wbase = (i * y + c) * n_in;
                        let gbase = (s * y + c) * n_in;
                        for k in 0..n_in {
                            dcaps[xbase + k] = dcaps[xbase + k] + wd[wbase + k] * gd[gbase + k];
                            dw[wbase + k] = dw[wbase + k] + xd[xbase + k] * gd[gbase + k];
                        }
                    }
                }
            }
        }
        HeadKind::MatrixFull => {
            let y = weights.shape()[1];
            let n_out = weights.shape()[2];
            for s in 0..b {
                for i in 0..j {
                    let xbase = (s * j + i) * n_in;
                    for c in 0..y {
                        let wbase = ((i * y + c) * n_out) * n_in;
                        let gbase = (s * y + c) * n_out;
                        for r in 0..n_out {
                            let g = gd[gbase + r];
                            let wrow = wbase + r * n_in;
                            for m in 0..n_in {
                                dcaps[xbase + m] = dcaps[xbase + m] + wd[wrow + m] * g;
                                dw[wrow + m] = dw[wrow + m] + xd[xbase + m] * g;
                            }
                        }
                    }
                }
            }
        }
        HeadKind::MatrixSquare => {
            let y = weights.shape()[1];
            let k = weights.shape()[2];
            for s in 0..b {
                for i in 0..j {
                    let xbase = (s * j + i) * n_in;
                    for c in 0..y {
                        let wbase = (i * y + c) * n_in;
                        let gbase = (s * y + c) * n_in;
                        for r in 0..k {
                            for t in 0..k {
                                let g = gd[gbase + r * k + t];
                                for q in 0..k {
                                    dw[wbase + r * k + q] =
                                        dw[wbase + r * k + q] + g * xd[xbase + q * k + t];
                                    dcaps[xbase + q * k + t] =
                                        dcaps[xbase + q * k + t] + g * wd[wbase + r * k + q];
                                }
                            }
                        }
                    }
                }
            }
        }
        HeadKind::Fc => return Err(Error::config("fc head is not a capsule transform")),
    }
    Ok((
        Tensor::new(caps.shape().to_vec(), dcaps)?,
        Tensor::new(weights.shape().to_vec(), dw)?,
    ))
}

/// Euclidean norm of each class capsule: `[.., y, n] -> [.., y]`.
pub fn capsule_norms_forward<T: Scalar>(caps: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, y, n) = caps_batch_dims(caps)?;
    let batched = caps.rank() == 3;
    let mut out = vec![T::zero(); b * y];
    for s in 0..b {
        for c in 0..y {
            let base = (s * y + c) * n;
            let mut acc = T::zero();
            for k in 0..n {
                let v = caps.data()[base + k];
                acc = acc + v * v;
            }
            out[s * y + c] = acc.sqrt();
        }
    }
    if batched {
        Tensor::new(vec![b, y], out)
    } else {
        Tensor::new(vec![y], out)
    }
}

/// Norm gradient; subgradient 0 at the zero vector.
pub fn capsule_norms_backward<T: Scalar>(
    caps: &Tensor<T>,
    norms: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, y, n) = caps_batch_dims(caps)?;
    let mut dcaps = vec![T::zero(); caps.len()];
    for s in 0..b {
        for c in 0..y {
            let norm = norms.data()[s * y + c];
            if norm == T::zero() {
                continue;
            }
            let g = grad.data()[s * y + c] / norm;
            let base = (s * y + c) * n;
            for k in 0..n {
                dcaps[base + k] = g * caps.data()[base + k];
            }
        }
    }
    Tensor::new(caps.shape().to_vec(), dcaps)
}

/// Exact trainable parameter count of a head.
pub fn head_param_count(kind: HeadKind, j: usize, n_in: usize, n_out: usize, y: usize) -> u64 {
    let (j, n_in, n_out, y) = (j as u64, n_in as u64, n_out as u64, y as u64);
    match kind {
        // Flatten + dense with bias over all j*n scalars.
        HeadKind::Fc => j * n_in * y + y,
        HeadKind::Hvc => j * y * n_in,
        HeadKind::MatrixSquare => j * y * n_in,
        HeadKind::MatrixFull => j * y * n_in * n_out,
    }
}

/// Per-pair and total multiply/add counts of one head transform.
///
/// "Within pair" counts the transform of a single (input capsule, class)
/// pair; the cross-capsule summation that merges the j transformed capsules
/// per class is counted separately and is identical for all kinds of equal
/// output dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadOpCount {
    pub per_pair_multiplies: u64,
    pub per_pair_additions: u64,
    pub pairs: u64,
    pub total_multiplies: u64,
    pub total_additions_within_pairs: u64,
    pub cross_capsule_additions: u64,
}

pub fn head_op_count(
    kind: HeadKind,
    j: usize,
    n_in: usize,
    n_out: usize,
    y: usize,
) -> Result<HeadOpCount> {
    let pairs = (j * y) as u64;
    let (mul, add, out_dim) = match kind {
        HeadKind::Hvc => (n_in as u64, 0u64, n_in as u64),
        HeadKind::MatrixFull => (
            (n_out * n_in) as u64,
            (n_out * (n_in - 1)) as u64,
            n_out as u64,
        ),
        HeadKind::MatrixSquare => {
            let k = integer_sqrt(n_in).ok_or_else(|| {
                Error::config(format!(
                    "matrix-square op count requires a perfect-square capsule dimension, got {n_in}"
                ))
            })? as u64;
            (k * k * k, k * k * (k - 1), (n_in) as u64)
        }
        HeadKind::Fc => return Err(Error::config("fc head has no per-pair transform")),
    };
    Ok(HeadOpCount {
        per_pair_multiplies: mul,
        per_pair_additions: add,
        pairs,
        total_multiplies: mul * pairs,
        total_additions_within_pairs: add * pairs,
        cross_capsule_additions: (y as u64) * (j as u64 - 1) * out_dim,
    })
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // Argmax of the norm readout is invariant under positive rescaling
        // of all class capsules.
        #[test]
        fn norm_argmax_scale_invariant(
            vals in proptest::collection::vec(-5.0f32..5.0, 12),
            scale in 0.01f32..100.0,
        ) {
            let caps = Tensor::new(vec![3, 4], vals).unwrap();
            let norms = capsule_norms_forward(&caps).unwrap();
            let scaled = capsule_norms_forward(&caps.scale(scale)).unwrap();
            let argmax = |t: &Tensor<f32>| {
                t.data().iter().enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
            };
            prop_assert_eq!(argmax(&norms), argmax(&scaled));
        }
    }
}
