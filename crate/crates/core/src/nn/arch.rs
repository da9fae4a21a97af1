use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NnError, Tensor, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub(crate) fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(NnError::Architecture(format!("unknown activation `{other}`"))),
        }
    }
}

/// A parameter tensor's shape and, for weight matrices, `(fan_in, fan_out)`.
type ParamSlot = (Vec<usize>, Option<(usize, usize)>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    },
    /// Gates are stored in the order input, forget, output, candidate.
    Lstm {
        input_dim: usize,
        hidden_dim: usize,
        seq_len: usize,
    },
    Softmax {
        in_dim: usize,
        n_classes: usize,
    },
}

impl LayerSpec {
    pub fn in_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            LayerSpec::Lstm {
                input_dim, seq_len, ..
            } => input_dim * seq_len,
            LayerSpec::Softmax { in_dim, .. } => in_dim,
        }
    }

    pub fn out_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { out_dim, .. } => out_dim,
            LayerSpec::Lstm { hidden_dim, .. } => hidden_dim,
            LayerSpec::Softmax { n_classes, .. } => n_classes,
        }
    }

    /// Parameter tensor shapes as `(shape, fan_in, fan_out)`; biases have
    /// no fan and are zero-initialised.
    fn param_layout(&self) -> Vec<ParamSlot> {
        match *self {
            LayerSpec::Dense {
                in_dim, out_dim, ..
            } => vec![
                (vec![out_dim, in_dim], Some((in_dim, out_dim))),
                (vec![out_dim], None),
            ],
            LayerSpec::Lstm {
                input_dim,
                hidden_dim,
                ..
            } => {
                let g = 4 * hidden_dim;
                vec![
                    (vec![g, input_dim], Some((input_dim, hidden_dim))),
                    (vec![g, hidden_dim], Some((hidden_dim, hidden_dim))),
                    (vec![g], None),
                ]
            }
            LayerSpec::Softmax { in_dim, n_classes } => vec![
                (vec![n_classes, in_dim], Some((in_dim, n_classes))),
                (vec![n_classes], None),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { .. } | LayerSpec::Softmax { .. } => 2,
            LayerSpec::Lstm { .. } => 3,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense {
                in_dim,
                out_dim,
                activation,
            } => write!(f, "dense:{in_dim}:{out_dim}:{}", activation.name()),
            LayerSpec::Lstm {
                input_dim,
                hidden_dim,
                seq_len,
            } => write!(f, "lstm:{input_dim}:{hidden_dim}:{seq_len}"),
            LayerSpec::Softmax { in_dim, n_classes } => write!(f, "softmax:{in_dim}:{n_classes}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize, NnError> {
            parts
                .get(i)
                .ok_or_else(|| NnError::Architecture(format!("layer `{s}` is missing fields")))?
                .parse::<usize>()
                .map_err(|e| NnError::Architecture(format!("layer `{s}`: {e}")))
        };
        let spec = match parts[0] {
            "dense" if parts.len() == 4 => LayerSpec::Dense {
                in_dim: num(1)?,
                out_dim: num(2)?,
                activation: parts[3].parse()?,
            },
            "lstm" if parts.len() == 4 => LayerSpec::Lstm {
                input_dim: num(1)?,
                hidden_dim: num(2)?,
                seq_len: num(3)?,
            },
            "softmax" if parts.len() == 3 => LayerSpec::Softmax {
                in_dim: num(1)?,
                n_classes: num(2)?,
            },
            _ => return Err(NnError::Architecture(format!("cannot parse layer `{s}`"))),
        };
        Ok(spec)
    }
}

/// A validated stack of layers ending in exactly one softmax output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        let err = |m: String| Err(NnError::Architecture(m));
        if layers.is_empty() {
            return err("architecture has no layers".into());
        }
        for (i, layer) in layers.iter().enumerate() {
            let dims_ok = match *layer {
                LayerSpec::Dense {
                    in_dim, out_dim, ..
                } => in_dim >= 1 && out_dim >= 1,
                LayerSpec::Lstm {
                    input_dim,
                    hidden_dim,
                    seq_len,
                } => input_dim >= 1 && hidden_dim >= 1 && seq_len >= 1,
                LayerSpec::Softmax { in_dim, n_classes } => in_dim >= 1 && n_classes >= 1,
            };
            if !dims_ok {
                return err(format!("layer {i} ({layer}) has a zero dimension"));
            }
            if matches!(layer, LayerSpec::Lstm { .. }) && i != 0 {
                return err(format!("layer {i}: an LSTM cell must be the first layer"));
            }
            let is_softmax = matches!(layer, LayerSpec::Softmax { .. });
            if is_softmax != (i == layers.len() - 1) {
                return err(format!(
                    "layer {i}: exactly one softmax output is required, and it must be last"
                ));
            }
            if i > 0 {
                let prev = layers[i - 1].out_width();
                if prev != layer.in_width() {
                    return err(format!(
                        "layer {i} ({layer}) expects width {}, previous layer produces {prev}",
                        layer.in_width()
                    ));
                }
            }
        }
        Ok(Self { layers })
    }

    /// The desk-scale benchmark: 20-unit LSTM over 10 steps of 5 features,
    /// followed by a 3-way softmax.
    pub fn benchmark() -> Self {
        Self::new(vec![
            LayerSpec::Lstm {
                input_dim: 5,
                hidden_dim: 20,
                seq_len: 10,
            },
            LayerSpec::Softmax {
                in_dim: 20,
                n_classes: 3,
            },
        ])
        .expect("benchmark architecture is valid")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Flattened per-sample input width.
    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| l.param_layout().into_iter().map(|(s, _)| s))
            .collect()
    }

    /// Seeded Glorot-uniform weights, zero biases, version 0.
    pub fn init_weights(&self, seed: u64) -> WeightSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for layer in &self.layers {
            for (shape, fan) in layer.param_layout() {
                let mut t = Tensor::zeros(&shape);
                if let Some((fan_in, fan_out)) = fan {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for x in t.data_mut() {
                        *x = rng.random_range(-limit..limit);
                    }
                }
                tensors.push(t);
            }
        }
        WeightSet::new(tensors, 0)
    }

    pub(crate) fn check_weights(&self, w: &[Tensor]) -> Result<(), NnError> {
        let shapes = self.param_shapes();
        if shapes.len() != w.len() {
            return Err(NnError::Shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                w.len()
            )));
        }
        let mut idx = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            for _ in 0..layer.param_count() {
                if w[idx].shape() != shapes[idx].as_slice() {
                    return Err(NnError::Shape(format!(
                        "layer {li} ({layer}): tensor {idx} has shape {:?}, expected {:?}",
                        w[idx].shape(),
                        shapes[idx]
                    )));
                }
                idx += 1;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let layers = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()?;
        Architecture::new(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        "dense:2:3:tanh,softmax:3:3".parse().unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = small();
        assert_eq!(arch.init_weights(7), arch.init_weights(7));
        assert_ne!(arch.init_weights(7), arch.init_weights(8));
        assert_eq!(arch.init_weights(7).version, 0);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let arch = Architecture::benchmark();
        let w = arch.init_weights(1);
        let limit = (6.0f64 / 25.0).sqrt();
        assert!(w.tensors[0].data().iter().all(|x| x.abs() < limit));
        assert!(w.tensors[2].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_broken_chains() {
        assert!("dense:2:3:tanh,softmax:4:3".parse::<Architecture>().is_err());
        assert!("dense:2:3:tanh".parse::<Architecture>().is_err());
        assert!("softmax:2:3,softmax:3:3".parse::<Architecture>().is_err());
        assert!("dense:2:4:relu,lstm:4:3:2,softmax:3:3"
            .parse::<Architecture>()
            .is_err());
        assert!("dense:0:3:tanh,softmax:3:3".parse::<Architecture>().is_err());
        assert!("lstm:1:1:0,softmax:1:2".parse::<Architecture>().is_err());
    }

    #[test]
    fn display_parses_back() {
        let arch: Architecture = "lstm:5:20:10,dense:20:8:relu,softmax:8:3".parse().unwrap();
        assert_eq!(arch.to_string().parse::<Architecture>().unwrap(), arch);
        assert_eq!(arch.input_width(), 50);
        assert_eq!(arch.n_classes(), 3);
    }

    #[test]
    fn weight_check_names_layer() {
        let arch = small();
        let mut w = arch.init_weights(0);
        w.tensors[2] = Tensor::zeros(&[2, 3]);
        let msg = arch.check_weights(&w.tensors).unwrap_err().to_string();
        assert!(msg.contains("layer 1"), "{msg}");
    }
}
