//! Shared feature extractor plus per-task linear heads.

use std::hash::Hasher;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Parameter, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    pub classes: usize,
}

/// Full network layout: extractor layers, the primary head and `M` secondary heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    pub primary: HeadSpec,
    pub secondary: Vec<HeadSpec>,
}

/// Hidden sizes and embedding width; the rest of an [`Architecture`] comes
/// from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub embedding_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embedding_dim: 32,
            embedding_activation: Activation::None,
        }
    }
}

impl Architecture {
    /// ReLU on every hidden layer, `config.embedding_activation` on the last.
    pub fn mlp(
        config: &ModelConfig,
        input_dim: usize,
        primary: HeadSpec,
        secondary: Vec<HeadSpec>,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden);
        dims.push(config.embedding_dim);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                in_dim: dims[i],
                out_dim: dims[i + 1],
                activation: if i + 1 == n {
                    config.embedding_activation
                } else {
                    Activation::Relu
                },
                frozen: false,
            })
            .collect();
        Self {
            layers,
            primary,
            secondary,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("feature extractor needs at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.in_dim,
                    i - 1,
                    self.layers[i - 1].out_dim
                )));
            }
        }
        for h in std::iter::once(&self.primary).chain(&self.secondary) {
            if h.classes < 2 {
                return Err(Error::Config(format!(
                    "head '{}' needs at least 2 classes, got {}",
                    h.name, h.classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// in_dim × out_dim
    pub weight: Parameter,
    /// 1 × out_dim
    pub bias: Parameter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Layer>,
}

impl FeatureExtractor {
    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_dim)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.spec.in_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub name: String,
    pub classes: usize,
    /// embedding_dim × classes
    pub weight: Parameter,
    /// 1 × classes
    pub bias: Parameter,
}

impl Head {
    pub fn zeros(name: impl Into<String>, embedding_dim: usize, classes: usize) -> Self {
        Self {
            name: name.into(),
            classes,
            weight: Parameter::new(Matrix::zeros((embedding_dim, classes))),
            bias: Parameter::new(Matrix::zeros((1, classes))),
        }
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }

    pub fn accumulate(&mut self, tape: &Tape, bound: &BoundHead) {
        self.weight.accumulate(tape, bound.weight);
        self.bias.accumulate(tape, bound.bias);
    }

    /// Logits without recording a graph.
    pub fn logits(&self, embedding: &Matrix) -> Result<Matrix> {
        if embedding.ncols() != self.weight.value.nrows() {
            return Err(Error::Dimension {
                op: "head",
                lhs: embedding.dim(),
                rhs: self.weight.shape(),
            });
        }
        Ok(embedding.dot(&self.weight.value) + &self.bias.value)
    }

    pub fn predict(&self, embedding: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(embedding)?))
    }
}

/// Which block of parameters to select.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSelector {
    /// Unfrozen feature-extractor parameters.
    Repr,
    Primary,
    Secondary(usize),
    AllSecondary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkBundle {
    pub extractor: FeatureExtractor,
    pub primary_head: Head,
    pub secondary_heads: Vec<Head>,
}

/// Tape handles for one head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for every parameter of a bundle, produced by [`NetworkBundle::bind`].
#[derive(Clone, Debug)]
pub struct BoundBundle {
    pub layers: Vec<(Var, Var)>,
    pub primary: BoundHead,
    pub secondary: Vec<BoundHead>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Weights ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)), biases zero.
///
/// Parameters are drawn in a fixed order (layers, primary head, secondary
/// heads) so adding secondary heads never changes the other weights.
pub fn init_bundle(arch: &Architecture, seed: u64) -> Result<NetworkBundle> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layers
        .iter()
        .map(|spec| {
            let mut weight = Parameter::new(uniform_matrix(&mut rng, spec.in_dim, spec.out_dim));
            let mut bias = Parameter::new(Matrix::zeros((1, spec.out_dim)));
            weight.frozen = spec.frozen;
            bias.frozen = spec.frozen;
            Layer {
                spec: spec.clone(),
                weight,
                bias,
            }
        })
        .collect();
    let emb = arch.embedding_dim();
    let mut head = |h: &HeadSpec| Head {
        name: h.name.clone(),
        classes: h.classes,
        weight: Parameter::new(uniform_matrix(&mut rng, emb, h.classes)),
        bias: Parameter::new(Matrix::zeros((1, h.classes))),
    };
    let primary_head = head(&arch.primary);
    let secondary_heads = arch.secondary.iter().map(&mut head).collect();
    Ok(NetworkBundle {
        extractor: FeatureExtractor { layers },
        primary_head,
        secondary_heads,
    })
}

impl NetworkBundle {
    pub fn architecture(&self) -> Architecture {
        let head = |h: &Head| HeadSpec {
            name: h.name.clone(),
            classes: h.classes,
        };
        Architecture {
            layers: self.extractor.layers.iter().map(|l| l.spec.clone()).collect(),
            primary: head(&self.primary_head),
            secondary: self.secondary_heads.iter().map(head).collect(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.extractor.embedding_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    /// Freezes (or unfreezes) extractor layer `index`.
    pub fn set_frozen(&mut self, index: usize, frozen: bool) -> Result<()> {
        let n = self.extractor.layers.len();
        let layer = self
            .extractor
            .layers
            .get_mut(index)
            .ok_or_else(|| Error::Config(format!("layer index {index} out of range (have {n})")))?;
        layer.spec.frozen = frozen;
        layer.weight.frozen = frozen;
        layer.bias.frozen = frozen;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBundle {
        BoundBundle {
            layers: self
                .extractor
                .layers
                .iter()
                .map(|l| (tape.param(&l.weight), tape.param(&l.bias)))
                .collect(),
            primary: self.primary_head.bind(tape),
            secondary: self.secondary_heads.iter().map(|h| h.bind(tape)).collect(),
        }
    }

    /// Adds every bound leaf's gradient into its parameter. Call once per tape.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundBundle) {
        for (l, (w, b)) in self.extractor.layers.iter_mut().zip(&bound.layers) {
            l.weight.accumulate(tape, *w);
            l.bias.accumulate(tape, *b);
        }
        self.primary_head.accumulate(tape, &bound.primary);
        for (h, bh) in self.secondary_heads.iter_mut().zip(&bound.secondary) {
            h.accumulate(tape, bh);
        }
    }

    /// Records the extractor forward pass for input node `x`.
    pub fn forward_features(&self, tape: &mut Tape, bound: &BoundBundle, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.input_dim() {
            return Err(Error::Dimension {
                op: "forward_features",
                lhs: tape.shape(x),
                rhs: (self.input_dim(), self.embedding_dim()),
            });
        }
        let mut h = x;
        for (layer, (w, b)) in self.extractor.layers.iter().zip(&bound.layers) {
            let z = tape.matmul(h, *w)?;
            let z = tape.add_bias(z, *b)?;
            h = match layer.spec.activation {
                Activation::Relu => tape.relu(z),
                Activation::None => z,
            };
        }
        Ok(h)
    }

    /// Embedding without recording a graph.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "embed",
                lhs: x.dim(),
                rhs: (self.input_dim(), self.embedding_dim()),
            });
        }
        let mut h = x.to_owned();
        for layer in &self.extractor.layers {
            let mut z = h.dot(&layer.weight.value);
            z += &layer.bias.value;
            if layer.spec.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn params_of(&self, selector: ParamSelector) -> Result<Vec<&Parameter>> {
        Ok(match selector {
            ParamSelector::Repr => self
                .extractor
                .layers
                .iter()
                .filter(|l| !l.spec.frozen)
                .flat_map(|l| [&l.weight, &l.bias])
                .collect(),
            ParamSelector::Primary => self.primary_head.params().to_vec(),
            ParamSelector::Secondary(m) => self
                .secondary_heads
                .get(m)
                .ok_or_else(|| self.bad_secondary(m))?
                .params()
                .to_vec(),
            ParamSelector::AllSecondary => self
                .secondary_heads
                .iter()
                .flat_map(|h| h.params())
                .collect(),
        })
    }

    pub fn params_of_mut(&mut self, selector: ParamSelector) -> Result<Vec<&mut Parameter>> {
        let err = self.bad_secondary_opt(selector);
        Ok(match selector {
            ParamSelector::Repr => self
                .extractor
                .layers
                .iter_mut()
                .filter(|l| !l.spec.frozen)
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect(),
            ParamSelector::Primary => self.primary_head.params_mut().into_iter().collect(),
            ParamSelector::Secondary(m) => match self.secondary_heads.get_mut(m) {
                Some(h) => h.params_mut().into_iter().collect(),
                None => return Err(err.expect("index checked")),
            },
            ParamSelector::AllSecondary => self
                .secondary_heads
                .iter_mut()
                .flat_map(|h| h.params_mut())
                .collect(),
        })
    }

    fn bad_secondary(&self, m: usize) -> Error {
        Error::Config(format!(
            "no secondary head {m} (bundle has {})",
            self.secondary_heads.len()
        ))
    }

    fn bad_secondary_opt(&self, selector: ParamSelector) -> Option<Error> {
        match selector {
            ParamSelector::Secondary(m) if m >= self.secondary_heads.len() => {
                Some(self.bad_secondary(m))
            }
            _ => None,
        }
    }

    /// Every parameter including frozen ones.
    pub fn all_params(&self) -> Vec<&Parameter> {
        self.extractor
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .chain(self.primary_head.params())
            .chain(self.secondary_heads.iter().flat_map(|h| h.params()))
            .collect()
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.extractor
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(self.primary_head.params_mut())
            .chain(self.secondary_heads.iter_mut().flat_map(|h| h.params_mut()))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.all_params_mut() {
            p.zero_grad();
        }
    }
}

/// Order-sensitive fingerprint of parameter values (bit patterns).
pub fn checksum<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for p in params {
        h.write_usize(p.value.nrows());
        h.write_usize(p.value.ncols());
        for v in p.value.iter() {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
