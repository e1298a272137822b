//! Model assembly: a convolutional stem plus a classification head.
//!
//! Two stems are provided. The full stem is the 11-convolution pyramid used
//! for 299x299x3 inputs (3x3 kernels, three 2x2 max pools, channel widths
//! 32/64/128/256). The tiny stem (conv16-conv16-pool-conv32-conv32-pool, all
//! 3x3) targets small grayscale images. Every convolution is followed by
//! batch normalization and ReLU; convolutions carry no bias (the batch-norm
//! shift subsumes it).

use crate::autodiff::{NodeId, Tape};
use crate::capsule::{
    capsule_norms_forward, capsule_transform_forward, caps_perm, head_weight_shape,
    reshape_to_capsules, CapsMethod, HeadKind,
};
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_eval_forward, conv2d_forward, dense_forward, maxpool2x2_forward, BatchStats,
    ConvSpec, BN_EPSILON, BN_MOMENTUM,
};
use crate::rng::{SeededRng, Stream};
use crate::tensor::{Fill, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemKind {
    /// The full 299x299 stem: 11 convolutions in four width stages.
    Full,
    /// Desk-scale stem for small inputs: conv16-conv16-pool-conv32-conv32-pool.
    Tiny,
}

impl StemKind {
    pub fn name(&self) -> &'static str {
        match self {
            StemKind::Full => "full",
            StemKind::Tiny => "tiny",
        }
    }
}

/// Head configuration: kind, reshaping method, and capsule dimensions.
/// `capsule_dim` is the method-A dimension (and the input dimension for the
/// full-matrix head); `capsule_dim_out` applies to the full-matrix head only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub method: CapsMethod,
    pub capsule_dim: usize,
    pub capsule_dim_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    /// Input sample shape (H, W, C).
    pub input: (usize, usize, usize),
    pub stem: StemKind,
    pub head: HeadSpec,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy)]
enum StemLayer {
    Conv(ConvSpec),
    Pool,
}

fn stem_layers(kind: StemKind, in_channels: usize) -> Vec<StemLayer> {
    let conv = |cin, cout, stride| {
        StemLayer::Conv(ConvSpec {
            kernel: 3,
            stride,
            in_channels: cin,
            out_channels: cout,
        })
    };
    match kind {
        StemKind::Full => vec![
            conv(in_channels, 32, 2),
            conv(32, 32, 1),
            conv(32, 32, 1),
            StemLayer::Pool,
            conv(32, 64, 1),
            conv(64, 64, 1),
            conv(64, 64, 1),
            StemLayer::Pool,
            conv(64, 128, 1),
            conv(128, 128, 1),
            conv(128, 128, 1),
            StemLayer::Pool,
            conv(128, 256, 1),
            conv(256, 256, 1),
        ],
        StemKind::Tiny => vec![
            conv(in_channels, 16, 1),
            conv(16, 16, 1),
            StemLayer::Pool,
            conv(16, 32, 1),
            conv(32, 32, 1),
            StemLayer::Pool,
        ],
    }
}

/// Resolved head geometry against a concrete stem output shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadGeometry {
    pub kind: HeadKind,
    pub method: CapsMethod,
    pub j: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl ModelSpec {
    /// Output shapes of every stem stage, starting from the input.
    pub fn shape_chain(&self) -> Result<Vec<(String, (usize, usize, usize))>> {
        let (mut h, mut w, mut c) = self.input;
        let mut rows = vec![("input".to_string(), (h, w, c))];
        for (i, layer) in stem_layers(self.stem, self.input.2).iter().enumerate() {
            match layer {
                StemLayer::Conv(spec) => {
                    h = spec.out_extent(h)?;
                    w = spec.out_extent(w)?;
                    c = spec.out_channels;
                    rows.push((
                        format!("conv{i} 3x3/{} x{}", spec.stride, spec.out_channels),
                        (h, w, c),
                    ));
                }
                StemLayer::Pool => {
                    if h < 2 || w < 2 {
                        return Err(Error::shape(format!(
                            "pool layer {i} on {h}x{w} maps"
                        )));
                    }
                    h = (h - 2) / 2 + 1;
                    w = (w - 2) / 2 + 1;
                    rows.push((format!("maxpool{i} 2x2/2"), (h, w, c)));
                }
            }
        }
        Ok(rows)
    }

    pub fn stem_output(&self) -> Result<(usize, usize, usize)> {
        Ok(self.shape_chain()?.last().unwrap().1)
    }

    /// Resolve head geometry (j, n_in, n_out) against the stem output.
    pub fn head_geometry(&self) -> Result<HeadGeometry> {
        let (h, w, c) = self.stem_output()?;
        let (j, n_in) = match self.head.kind {
            HeadKind::Fc => (1, h * w * c),
            _ => {
                let n_arg = match self.head.method {
                    CapsMethod::A => Some(self.head.capsule_dim),
                    _ => None,
                };
                let (j, n, _) = caps_perm(h, w, c, self.head.method, n_arg)?;
                (j, n)
            }
        };
        let n_out = match self.head.kind {
            HeadKind::MatrixFull => {
                if self.head.capsule_dim_out == 0 {
                    return Err(Error::config(
                        "matrix-full head requires a positive output capsule dimension",
                    ));
                }
                self.head.capsule_dim_out
            }
            _ => n_in,
        };
        if self.head.kind != HeadKind::Fc {
            // Fail early on a non-square dimension for the square head.
            head_weight_shape(self.head.kind, j, n_in, n_out, self.classes)?;
        }
        Ok(HeadGeometry {
            kind: self.head.kind,
            method: self.head.method,
            j,
            n_in,
            n_out,
        })
    }

    /// Named parameter shapes in registration order.
    pub fn param_layout(&self) -> Result<Vec<ParamDef>> {
        let mut defs = Vec::new();
        for (i, layer) in stem_layers(self.stem, self.input.2).iter().enumerate() {
            if let StemLayer::Conv(spec) = layer {
                defs.push(ParamDef {
                    name: format!("stem/conv{i}/w"),
                    shape: spec.weight_shape(),
                    init: Init::He {
                        fan_in: spec.kernel * spec.kernel * spec.in_channels,
                    },
                });
                defs.push(ParamDef {
                    name: format!("stem/bn{i}/gamma"),
                    shape: vec![spec.out_channels],
                    init: Init::One,
                });
                defs.push(ParamDef {
                    name: format!("stem/bn{i}/beta"),
                    shape: vec![spec.out_channels],
                    init: Init::Zero,
                });
            }
        }
        let geom = self.head_geometry()?;
        match geom.kind {
            HeadKind::Fc => {
                defs.push(ParamDef {
                    name: "head/fc/w".to_string(),
                    shape: vec![geom.n_in, self.classes],
                    init: Init::He { fan_in: geom.n_in },
                });
                defs.push(ParamDef {
                    name: "head/fc/b".to_string(),
                    shape: vec![self.classes],
                    init: Init::Zero,
                });
            }
            kind => {
                defs.push(ParamDef {
                    name: format!("head/{}/w", kind.name()),
                    shape: head_weight_shape(kind, geom.j, geom.n_in, geom.n_out, self.classes)?,
                    init: Init::UniformSum { j: geom.j },
                });
            }
        }
        Ok(defs)
    }

    /// Exact count of trainable scalars (running statistics excluded).
    pub fn count_params(&self) -> Result<u64> {
        Ok(self
            .param_layout()?
            .iter()
            .map(|d| d.shape.iter().product::<usize>() as u64)
            .sum())
    }
}

#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// normal(0, sqrt(2 / fan_in)) for conv and dense weights.
    He { fan_in: usize },
    /// normal(0, 1/sqrt(j)) for head weights (uniform sum over j capsules).
    UniformSum { j: usize },
    One,
    Zero,
}

/// Running mean/variance of one batch-norm layer (not trainable).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNorm<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningNorm<T> {
    fn new(channels: usize) -> Self {
        RunningNorm {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    fn fold(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(stats.mean.data()) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(stats.var.data()) {
            *r = m * *r + one_m * b;
        }
    }
}

/// A materialized model: spec, named parameters in registration order, and
/// batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub bn_states: Vec<RunningNorm<T>>,
}

/// Handles into one recorded forward pass.
pub struct TrainForward<T: Scalar> {
    pub loss: NodeId,
    pub scores: Tensor<T>,
    pub param_nodes: Vec<NodeId>,
}

impl<T: Scalar> Model<T> {
    /// Build and initialize a model from its spec; all randomness comes from
    /// the init stream of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let layout = spec.param_layout()?;
        let mut rng = SeededRng::stream(seed, Stream::Init);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for def in &layout {
            let t = match def.init {
                Init::He { fan_in } => Tensor::create(
                    &def.shape,
                    Fill::Normal {
                        mean: 0.0,
                        std: (2.0 / fan_in as f64).sqrt(),
                        rng: &mut rng,
                    },
                )?,
                Init::UniformSum { j } => Tensor::create(
                    &def.shape,
                    Fill::Normal {
                        mean: 0.0,
                        std: 1.0 / (j as f64).sqrt(),
                        rng: &mut rng,
                    },
                )?,
                Init::One => Tensor::ones(&def.shape),
                Init::Zero => Tensor::zeros(&def.shape),
            };
            names.push(def.name.clone());
            params.push(t);
        }
        let bn_states = stem_layers(spec.stem, spec.input.2)
            .iter()
            .filter_map(|l| match l {
                StemLayer::Conv(s) => Some(RunningNorm::new(s.out_channels)),
                StemLayer::Pool => None,
            })
            .collect();
        Ok(Model {
            spec,
            names,
            params,
            bn_states,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.len() as u64).sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape().to_vec()).collect()
    }

    /// Record a train-mode forward pass (batch statistics, running-stat
    /// updates) through the capsule or dense head down to the scalar loss.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<TrainForward<T>> {
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect();
        let mut x = tape.leaf(images.clone(), false);
        let mut pi = 0usize; // parameter cursor
        let mut bi = 0usize; // batch-norm state cursor
        for layer in stem_layers(self.spec.stem, self.spec.input.2) {
            match layer {
                StemLayer::Conv(spec) => {
                    let w = param_nodes[pi];
                    let gamma = param_nodes[pi + 1];
                    let beta = param_nodes[pi + 2];
                    pi += 3;
                    x = tape.conv2d(x, w, &spec)?;
                    let (bn_out, stats) =
                        tape.batchnorm_train(x, gamma, beta, T::from_f64(BN_EPSILON))?;
                    self.bn_states[bi].fold(&stats);
                    bi += 1;
                    x = tape.relu(bn_out)?;
                }
                StemLayer::Pool => {
                    x = tape.maxpool2x2(x)?;
                }
            }
        }
        let geom = self.spec.head_geometry()?;
        let scores = match geom.kind {
            HeadKind::Fc => {
                let n = images.shape()[0];
                let flat = tape.reshape(x, &[n, geom.n_in])?;
                tape.dense(flat, param_nodes[pi], param_nodes[pi + 1])?
            }
            kind => {
                let n_arg = match geom.method {
                    CapsMethod::A => Some(self.spec.head.capsule_dim),
                    _ => None,
                };
                let caps = tape.caps_reshape(x, geom.method, n_arg)?;
                let out = tape.caps_transform(kind, caps, param_nodes[pi])?;
                tape.caps_norms(out)?
            }
        };
        let loss = tape.softmax_xent(scores, labels, T::from_f64(smoothing))?;
        Ok(TrainForward {
            loss,
            scores: tape.value(scores).clone(),
            param_nodes,
        })
    }

    /// Pure eval-mode forward: running-statistic batch norm, no tape.
    /// Returns class scores `[N, y]`.
    pub fn forward_scores_eval(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = images.clone();
        let mut pi = 0usize;
        let mut bi = 0usize;
        for layer in stem_layers(self.spec.stem, self.spec.input.2) {
            match layer {
                StemLayer::Conv(spec) => {
                    let (y, _) = conv2d_forward(&x, &self.params[pi], &spec)?;
                    let bn = &self.bn_states[bi];
                    let y = batchnorm_eval_forward(
                        &y,
                        &self.params[pi + 1],
                        &self.params[pi + 2],
                        &bn.mean,
                        &bn.var,
                        T::from_f64(BN_EPSILON),
                    )?;
                    x = y.relu();
                    pi += 3;
                    bi += 1;
                }
                StemLayer::Pool => {
                    let (y, _) = maxpool2x2_forward(&x)?;
                    x = y;
                }
            }
        }
        let geom = self.spec.head_geometry()?;
        match geom.kind {
            HeadKind::Fc => {
                let n = images.shape()[0];
                let flat = x.reshape(&[n, geom.n_in])?;
                dense_forward(&flat, &self.params[pi], &self.params[pi + 1])
            }
            kind => {
                let n_arg = match geom.method {
                    CapsMethod::A => Some(self.spec.head.capsule_dim),
                    _ => None,
                };
                let caps = reshape_to_capsules(&x, geom.method, n_arg)?;
                let out = capsule_transform_forward(kind, &caps.values, &self.params[pi])?;
                capsule_norms_forward(&out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc_head() -> HeadSpec {
        HeadSpec {
            kind: HeadKind::Fc,
            method: CapsMethod::B,
            capsule_dim: 0,
            capsule_dim_out: 0,
        }
    }

    fn full_fc(classes: usize) -> ModelSpec {
        ModelSpec {
            input: (299, 299, 3),
            stem: StemKind::Full,
            head: fc_head(),
            classes,
        }
    }

    #[test]
    fn full_stem_shape_chain_matches_published_rows() {
        let chain = full_fc(10).shape_chain().unwrap();
        let shapes: Vec<(usize, usize, usize)> = chain.iter().map(|r| r.1).collect();
        assert_eq!(
            shapes,
            vec![
                (299, 299, 3),
                (149, 149, 32),
                (147, 147, 32),
                (145, 145, 32),
                (72, 72, 32),
                (70, 70, 64),
                (68, 68, 64),
                (66, 66, 64),
                (33, 33, 64),
                (31, 31, 128),
                (29, 29, 128),
                (27, 27, 128),
                (13, 13, 128),
                (11, 11, 256),
                (9, 9, 256),
            ]
        );
    }

    #[test]
    fn full_fc_param_counts_match_hand_derivation() {
        assert_eq!(full_fc(10).count_params().unwrap(), 1_574_570);
        assert_eq!(full_fc(101).count_params().unwrap(), 3_461_637);
        assert_eq!(full_fc(1000).count_params().unwrap(), 22_104_200);
    }

    #[test]
    fn hvc_head_count_is_constant_over_method_a_dimensions() {
        let mut counts = Vec::new();
        for n in [8usize, 16, 32, 64, 128] {
            let spec = ModelSpec {
                input: (299, 299, 3),
                stem: StemKind::Full,
                head: HeadSpec {
                    kind: HeadKind::Hvc,
                    method: CapsMethod::A,
                    capsule_dim: n,
                    capsule_dim_out: 0,
                },
                classes: 10,
            };
            counts.push(spec.count_params().unwrap());
        }
        assert!(counts.iter().all(|&c| c == counts[0]));
        // Stem 1,367,200 plus the 207,360 head.
        assert_eq!(counts[0], 1_367_200 + 207_360);
    }

    #[test]
    fn tiny_stem_shapes() {
        let spec = ModelSpec {
            input: (28, 28, 1),
            stem: StemKind::Tiny,
            head: fc_head(),
            classes: 10,
        };
        assert_eq!(spec.stem_output().unwrap(), (4, 4, 32));
        let spec32 = ModelSpec {
            input: (32, 32, 1),
            ..spec
        };
        assert_eq!(spec32.stem_output().unwrap(), (5, 5, 32));
    }

    #[test]
    fn head_geometry_resolves_methods() {
        let base = ModelSpec {
            input: (28, 28, 1),
            stem: StemKind::Tiny,
            head: HeadSpec {
                kind: HeadKind::Hvc,
                method: CapsMethod::B,
                capsule_dim: 0,
                capsule_dim_out: 0,
            },
            classes: 10,
        };
        let g = base.head_geometry().unwrap();
        assert_eq!((g.j, g.n_in, g.n_out), (16, 32, 32));

        let ga = ModelSpec {
            head: HeadSpec {
                kind: HeadKind::Hvc,
                method: CapsMethod::A,
                capsule_dim: 8,
                capsule_dim_out: 0,
            },
            ..base
        }
        .head_geometry()
        .unwrap();
        assert_eq!((ga.j, ga.n_in), (64, 8));

        let gc = ModelSpec {
            head: HeadSpec {
                kind: HeadKind::Hvc,
                method: CapsMethod::C,
                capsule_dim: 0,
                capsule_dim_out: 0,
            },
            ..base
        }
        .head_geometry()
        .unwrap();
        assert_eq!((gc.j, gc.n_in), (32, 16));
    }

    #[test]
    fn square_head_rejects_non_square_dimension() {
        // Tiny stem, method C gives n = 16 (4x4): fine. Method B gives
        // n = 32: not a perfect square.
        let spec = ModelSpec {
            input: (28, 28, 1),
            stem: StemKind::Tiny,
            head: HeadSpec {
                kind: HeadKind::MatrixSquare,
                method: CapsMethod::B,
                capsule_dim: 0,
                capsule_dim_out: 0,
            },
            classes: 10,
        };
        assert!(matches!(spec.head_geometry(), Err(Error::Config(_))));
        let ok = ModelSpec {
            head: HeadSpec {
                kind: HeadKind::MatrixSquare,
                method: CapsMethod::C,
                capsule_dim: 0,
                capsule_dim_out: 0,
            },
            ..spec
        };
        assert!(ok.head_geometry().is_ok());
    }

    #[test]
    fn model_builds_and_evaluates() {
        let spec = ModelSpec {
            input: (20, 20, 1),
            stem: StemKind::Tiny,
            head: HeadSpec {
                kind: HeadKind::Hvc,
                method: CapsMethod::B,
                capsule_dim: 0,
                capsule_dim_out: 0,
            },
            classes: 3,
        };
        let model = Model::<f32>::new(spec, 1).unwrap();
        assert_eq!(model.param_count(), spec.count_params().unwrap());
        let images = Tensor::<f32>::full(&[2, 20, 20, 1], 0.5);
        let scores = model.forward_scores_eval(&images).unwrap();
        assert_eq!(scores.shape(), &[2, 3]);
        // Norm scores are non-negative.
        assert!(scores.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn same_seed_same_init() {
        let spec = ModelSpec {
            input: (20, 20, 1),
            stem: StemKind::Tiny,
            head: fc_head(),
            classes: 3,
        };
        let a = Model::<f32>::new(spec, 9).unwrap();
        let b = Model::<f32>::new(spec, 9).unwrap();
        assert_eq!(a.params, b.params);
    }
}
