//! Convolutional policy/value networks, one architecture per map size.

use rand::Rng;
use thiserror::Error;

use crate::env::NUM_PLANES;
use crate::maskdist::{head_sizes, NUM_HEADS};
use crate::numerics::{orthogonal_init, zeros_bias, ConvSpec, NumericsError, Real, Tape, Tensor, Var};

pub const HIDDEN_UNITS: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("no architecture for map size {0}")]
    UnsupportedMapSize(usize),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("observation shape {got:?} does not match [batch, {size}, {size}, {planes}]", planes = NUM_PLANES)]
    ObservationShape { size: usize, got: Vec<usize> },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Convolution (stride 1, no padding) followed by max-pooling and ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub map_size: usize,
    pub convs: Vec<ConvLayer>,
    pub flat_features: usize,
    pub head_sizes: [usize; NUM_HEADS],
}

impl Architecture {
    pub fn for_map(map_size: usize) -> Result<Self> {
        let c = |out_channels, kernel, pool| ConvLayer {
            out_channels,
            kernel,
            pool,
        };
        let convs = match map_size {
            4 => vec![c(16, 2, 1)],
            10 | 16 => vec![c(16, 3, 1), c(32, 3, 1)],
            24 => vec![c(16, 3, 2), c(32, 2, 2)],
            other => return Err(ModelError::UnsupportedMapSize(other)),
        };
        let mut side = map_size;
        let mut channels = NUM_PLANES;
        for l in &convs {
            side = (side - l.kernel + 1) / l.pool;
            channels = l.out_channels;
        }
        Ok(Self {
            map_size,
            convs,
            flat_features: side * side * channels,
            head_sizes: head_sizes(map_size, map_size),
        })
    }

    pub fn total_logits(&self) -> usize {
        self.head_sizes.iter().sum()
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = NUM_PLANES;
        for (i, l) in self.convs.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![l.kernel, l.kernel, cin, l.out_channels]));
            out.push((format!("conv{}.bias", i + 1), vec![l.out_channels]));
            cin = l.out_channels;
        }
        out.push(("hidden.weight".into(), vec![self.flat_features, HIDDEN_UNITS]));
        out.push(("hidden.bias".into(), vec![HIDDEN_UNITS]));
        out.push(("policy.weight".into(), vec![HIDDEN_UNITS, self.total_logits()]));
        out.push(("policy.bias".into(), vec![self.total_logits()]));
        out.push(("value.weight".into(), vec![HIDDEN_UNITS, 1]));
        out.push(("value.bias".into(), vec![1]));
        out
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[batch, size_d]` per action component.
    pub head_logits: Vec<Var>,
    /// `[batch]`.
    pub value: Var,
    /// Parameter leaves, same order as [`Network::params`].
    pub params: Vec<Var>,
}

/// Shared torso with a composite policy head and a scalar value head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real = f32> {
    arch: Architecture,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Network<T> {
    /// Orthogonal weights (gain 1) and zero biases.
    pub fn new<R: Rng + ?Sized>(map_size: usize, rng: &mut R) -> Result<Self> {
        let arch = Architecture::for_map(map_size)?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in arch.param_shapes() {
            let p = if shape.len() == 1 {
                zeros_bias(shape[0])
            } else {
                let cols = *shape.last().expect("non-empty");
                let rows = shape.iter().product::<usize>() / cols;
                let m: Tensor<T> = orthogonal_init(rows, cols, 1.0, rng);
                Tensor::new(shape, m.into_values())?
            };
            names.push(name);
            params.push(p);
        }
        Ok(Self { arch, names, params })
    }

    pub fn from_params(map_size: usize, params: Vec<Tensor<T>>) -> Result<Self> {
        let arch = Architecture::for_map(map_size)?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(ModelError::ParamCount {
                expected: shapes.len(),
                got: params.len(),
            });
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: p.shape().to_vec(),
                });
            }
        }
        let names = shapes.into_iter().map(|(n, _)| n).collect();
        Ok(Self { arch, names, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records the network on `tape` for observations `[batch, h, w, 27]`.
    /// With `requires_grad` false the parameters enter as constants.
    pub fn forward(&self, tape: &mut Tape<T>, obs: &Tensor<T>, requires_grad: bool) -> Result<Forward> {
        let n = self.arch.map_size;
        let s = obs.shape();
        if s.len() != 4 || s[1] != n || s[2] != n || s[3] != NUM_PLANES {
            return Err(ModelError::ObservationShape { size: n, got: s.to_vec() });
        }
        let batch = s[0];
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let (shape, values) = (p.shape().to_vec(), p.values().to_vec());
                if requires_grad {
                    tape.variable(shape, values)
                } else {
                    tape.constant(shape, values)
                }
            })
            .collect::<std::result::Result<_, _>>()?;

        let mut x = tape.constant(s.to_vec(), obs.values().to_vec())?;
        for (i, l) in self.arch.convs.iter().enumerate() {
            let spec = ConvSpec {
                kernel: l.kernel,
                stride: 1,
            };
            x = tape.conv2d(x, params[2 * i], params[2 * i + 1], spec)?;
            x = tape.maxpool2d(x, l.pool)?;
            x = tape.relu(x)?;
        }
        let x = tape.reshape(x, vec![batch, self.arch.flat_features])?;
        let k = 2 * self.arch.convs.len();
        let hidden = tape.linear(x, params[k], params[k + 1])?;
        let hidden = tape.relu(hidden)?;

        let logits = tape.linear(hidden, params[k + 2], params[k + 3])?;
        let mut head_logits = Vec::with_capacity(NUM_HEADS);
        let mut start = 0;
        for &size in &self.arch.head_sizes {
            head_logits.push(tape.slice_last(logits, start, size)?);
            start += size;
        }
        let value = tape.linear(hidden, params[k + 4], params[k + 5])?;
        let value = tape.reshape(value, vec![batch])?;
        Ok(Forward {
            head_logits,
            value,
            params,
        })
    }
}
