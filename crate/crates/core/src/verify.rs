//! Gradient verification registry.
//!
//! Every differentiable op kind is checked against central finite
//! differences at seeded random points (entries from normal(0.5, 0.25),
//! nudged away from ReLU kinks and pooling ties). All checks run in f64
//! with step `h = 1e-5` against a relative tolerance of `1e-4`.
//!
//! A fault can be injected into the backward pass of a named op to prove
//! the harness actually detects corrupted gradients.

use crate::autodiff::{grad_check, NodeId, Tape};
use crate::capsule::{CapsMethod, HeadKind};
use crate::error::Result;
use crate::layers::ConvSpec;
use crate::rng::{SeededRng, Stream};
use crate::tensor::{Fill, Tensor};

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
const POINTS_PER_OP: usize = 10;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub worst_error: f64,
    pub pass: bool,
}

/// Every op kind the registry covers, in report order.
pub fn op_names() -> Vec<&'static str> {
    vec![
        "add",
        "sub",
        "mul",
        "relu",
        "square",
        "sqrt",
        "scale",
        "matmul",
        "sum",
        "mean",
        "reshape",
        "conv2d",
        "maxpool2x2",
        "batchnorm",
        "dense",
        "caps_reshape",
        "hvc",
        "matrix-full",
        "matrix-square",
        "caps_norms",
        "loss_xent",
    ]
}

fn sample(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::create(
        shape,
        Fill::Normal {
            mean: 0.5,
            std: 0.25,
            rng,
        },
    )
    .expect("sample shape")
}

/// Keep values away from the ReLU kink at zero.
fn off_kink(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 };
        }
    }
    t
}

/// Separate values so 2x2 pooling windows have no near-ties.
fn spread(mut t: Tensor<f64>) -> Tensor<f64> {
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += i as f64 * 1e-3;
    }
    t
}

/// Strictly positive values for sqrt.
fn positive(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        *v = v.abs() + 0.1;
    }
    t
}

type Fault<'a> = Option<(&'a str, f64)>;

fn apply_fault(tape: &mut Tape<f64>, fault: Fault) {
    if let Some((op, factor)) = fault {
        tape.set_grad_fault(op, factor);
    }
}

/// Reduce an arbitrary node to a scalar through fixed random weights, so no
/// output coordinate has a degenerate zero gradient.
fn weighted_sum(
    tape: &mut Tape<f64>,
    node: NodeId,
    weights: &Tensor<f64>,
) -> Result<NodeId> {
    let w = tape.leaf(weights.clone(), false);
    let prod = tape.mul(node, w)?;
    tape.sum_all(prod)
}

fn worst(errors: impl IntoIterator<Item = Result<f64>>) -> Result<f64> {
    let mut max = 0f64;
    for e in errors {
        max = max.max(e?);
    }
    Ok(max)
}

/// Run one named check over its seeded random points; returns the worst
/// relative error observed.
///
/// A fault is applied only while checking the faulted op itself, so a
/// failure report names exactly the op whose gradient is corrupted (most
/// checks reduce through a `mul` node and would otherwise co-fail).
pub fn run_check(name: &'static str, seed: u64, fault: Fault) -> Result<f64> {
    let fault = fault.filter(|(op, _)| *op == name);
    let mut rng = SeededRng::stream(seed, Stream::Other(0xC0DE));
    let mut errs = Vec::new();
    for _ in 0..POINTS_PER_OP {
        let err = match name {
            "add" | "sub" | "mul" => {
                let point = sample(&mut rng, &[6]);
                let other = sample(&mut rng, &[6]);
                let r = sample(&mut rng, &[6]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let c = tape.leaf(other.clone(), false);
                    let v = tape.record_named(name, &[x, c])?;
                    weighted_sum(tape, v, &r)
                })
            }
            "relu" => {
                let point = off_kink(sample(&mut rng, &[8]));
                let r = sample(&mut rng, &[8]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let v = tape.relu(x)?;
                    weighted_sum(tape, v, &r)
                })
            }
            "square" => {
                let point = sample(&mut rng, &[8]);
                let r = sample(&mut rng, &[8]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let v = tape.square(x)?;
                    weighted_sum(tape, v, &r)
                })
            }
            "sqrt" => {
                let point = positive(sample(&mut rng, &[8]));
                let r = sample(&mut rng, &[8]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let v = tape.sqrt(x)?;
                    weighted_sum(tape, v, &r)
                })
            }
            "scale" => {
                let point = sample(&mut rng, &[8]);
                let r = sample(&mut rng, &[8]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let v = tape.scale(x, 1.75)?;
                    weighted_sum(tape, v, &r)
                })
            }
            "matmul" => {
                let point = sample(&mut rng, &[3, 4]);
                let other = sample(&mut rng, &[4, 2]);
                let r = sample(&mut rng, &[3, 2]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let c = tape.leaf(other.clone(), false);
                    let v = tape.matmul(x, c)?;
                    weighted_sum(tape, v, &r)
                })
            }
            "sum" => {
                let point = sample(&mut rng, &[3, 4]);
                let r = sample(&mut rng, &[4]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let v = tape.sum_axis(x, 0)?;
                    weighted_sum(tape, v, &r)
                })
            }
            "mean" => {
                let point = sample(&mut rng, &[3, 4]);
                let r = sample(&mut rng, &[3, 4]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let rl = tape.leaf(r.clone(), false);
                    let v = tape.mul(x, rl)?;
                    tape.mean_all(v)
                })
            }
            "reshape" => {
                let point = sample(&mut rng, &[2, 6]);
                let r = sample(&mut rng, &[3, 4]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let v = tape.reshape(x, &[3, 4])?;
                    weighted_sum(tape, v, &r)
                })
            }
            "conv2d" => {
                let spec = ConvSpec {
                    kernel: 3,
                    stride: 1,
                    in_channels: 2,
                    out_channels: 3,
                };
                let x0 = sample(&mut rng, &[1, 5, 5, 2]);
                let w0 = sample(&mut rng, &spec.weight_shape());
                let r = sample(&mut rng, &[1, 3, 3, 3]);
                // Check both differentiable inputs: the image and the kernel.
                let wrt_x = grad_check(&x0, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let w = tape.leaf(w0.clone(), false);
                    let v = tape.conv2d(x, w, &spec)?;
                    weighted_sum(tape, v, &r)
                });
                let wrt_w = grad_check(&w0, FD_STEP, |tape, w| {
                    apply_fault(tape, fault);
                    let x = tape.leaf(x0.clone(), false);
                    let v = tape.conv2d(x, w, &spec)?;
                    weighted_sum(tape, v, &r)
                });
                worst([wrt_x, wrt_w])
            }
            "maxpool2x2" => {
                let point = spread(sample(&mut rng, &[1, 4, 4, 2]));
                let r = sample(&mut rng, &[1, 2, 2, 2]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let v = tape.maxpool2x2(x)?;
                    weighted_sum(tape, v, &r)
                })
            }
            "batchnorm" => {
                let x0 = sample(&mut rng, &[4, 3]);
                let gamma0 = sample(&mut rng, &[3]);
                let beta0 = sample(&mut rng, &[3]);
                let r = sample(&mut rng, &[4, 3]);
                let wrt_x = grad_check(&x0, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let g = tape.leaf(gamma0.clone(), false);
                    let b = tape.leaf(beta0.clone(), false);
                    let (v, _) = tape.batchnorm_train(x, g, b, 1e-3)?;
                    weighted_sum(tape, v, &r)
                });
                let wrt_gamma = grad_check(&gamma0, FD_STEP, |tape, g| {
                    apply_fault(tape, fault);
                    let x = tape.leaf(x0.clone(), false);
                    let b = tape.leaf(beta0.clone(), false);
                    let (v, _) = tape.batchnorm_train(x, g, b, 1e-3)?;
                    weighted_sum(tape, v, &r)
                });
                worst([wrt_x, wrt_gamma])
            }
            "dense" => {
                let x0 = sample(&mut rng, &[3, 4]);
                let w0 = sample(&mut rng, &[4, 2]);
                let b0 = sample(&mut rng, &[2]);
                let r = sample(&mut rng, &[3, 2]);
                let wrt_x = grad_check(&x0, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let w = tape.leaf(w0.clone(), false);
                    let b = tape.leaf(b0.clone(), false);
                    let v = tape.dense(x, w, b)?;
                    weighted_sum(tape, v, &r)
                });
                let wrt_w = grad_check(&w0, FD_STEP, |tape, w| {
                    apply_fault(tape, fault);
                    let x = tape.leaf(x0.clone(), false);
                    let b = tape.leaf(b0.clone(), false);
                    let v = tape.dense(x, w, b)?;
                    weighted_sum(tape, v, &r)
                });
                let wrt_b = grad_check(&b0, FD_STEP, |tape, b| {
                    apply_fault(tape, fault);
                    let x = tape.leaf(x0.clone(), false);
                    let w = tape.leaf(w0.clone(), false);
                    let v = tape.dense(x, w, b)?;
                    weighted_sum(tape, v, &r)
                });
                worst([wrt_x, wrt_w, wrt_b])
            }
            "caps_reshape" => {
                let point = sample(&mut rng, &[1, 2, 2, 4]);
                let r = sample(&mut rng, &[1, 8, 2]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let v = tape.caps_reshape(x, CapsMethod::A, Some(2))?;
                    weighted_sum(tape, v, &r)
                })
            }
            "hvc" | "matrix-full" | "matrix-square" => {
                let kind = match name {
                    "hvc" => HeadKind::Hvc,
                    "matrix-full" => HeadKind::MatrixFull,
                    _ => HeadKind::MatrixSquare,
                };
                let (j, y, n_in, n_out) = (3usize, 2usize, 4usize, 5usize);
                let w_shape =
                    crate::capsule::head_weight_shape(kind, j, n_in, n_out, y)?;
                let caps0 = sample(&mut rng, &[1, j, n_in]);
                let w0 = sample(&mut rng, &w_shape);
                let out_n = if kind == HeadKind::MatrixFull { n_out } else { n_in };
                let r = sample(&mut rng, &[1, y, out_n]);
                let wrt_caps = grad_check(&caps0, FD_STEP, |tape, caps| {
                    apply_fault(tape, fault);
                    let w = tape.leaf(w0.clone(), false);
                    let v = tape.caps_transform(kind, caps, w)?;
                    weighted_sum(tape, v, &r)
                });
                let wrt_w = grad_check(&w0, FD_STEP, |tape, w| {
                    apply_fault(tape, fault);
                    let caps = tape.leaf(caps0.clone(), false);
                    let v = tape.caps_transform(kind, caps, w)?;
                    weighted_sum(tape, v, &r)
                });
                worst([wrt_caps, wrt_w])
            }
            "caps_norms" => {
                let point = sample(&mut rng, &[1, 3, 4]);
                let r = sample(&mut rng, &[1, 3]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    let v = tape.caps_norms(x)?;
                    weighted_sum(tape, v, &r)
                })
            }
            "loss_xent" => {
                let point = sample(&mut rng, &[2, 5]);
                grad_check(&point, FD_STEP, |tape, x| {
                    apply_fault(tape, fault);
                    tape.softmax_xent(x, &[1, 4], 0.1)
                })
            }
            other => {
                return Err(crate::error::Error::config(format!(
                    "unknown gradient check '{other}'"
                )))
            }
        };
        errs.push(err);
    }
    worst(errs)
}

/// Run every registered check. Each op kind appears exactly once.
pub fn run_all(seed: u64, fault: Fault) -> Result<Vec<CheckReport>> {
    op_names()
        .into_iter()
        .map(|name| {
            let worst_error = run_check(name, seed, fault)?;
            Ok(CheckReport {
                name,
                worst_error,
                pass: worst_error <= TOLERANCE,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_build_passes_every_check() {
        let reports = run_all(7, None).unwrap();
        assert_eq!(reports.len(), op_names().len());
        for r in &reports {
            assert!(r.pass, "{} failed with error {}", r.name, r.worst_error);
        }
    }

    #[test]
    fn each_op_reported_exactly_once() {
        let names = op_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn injected_mul_fault_is_caught_and_named() {
        let reports = run_all(7, Some(("mul", 1.01))).unwrap();
        let mul = reports.iter().find(|r| r.name == "mul").unwrap();
        assert!(!mul.pass, "mul fault not detected");
        assert!(mul.worst_error >= 5e-3);
        // Ops that never record a mul node stay green.
        let conv = reports.iter().find(|r| r.name == "conv2d").unwrap();
        assert!(conv.pass);
    }
}
