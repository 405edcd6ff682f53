//! Small trainable participants: a ReLU MLP classifier and the same MLP
//! applied per pixel for dense prediction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::container::Container;
use crate::error::{Error, Result};

pub const MAX_HIDDEN_LAYERS: usize = 3;
pub const MAX_WIDTH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    ClassLogits,
    DenseLogits,
    SaliencyMap,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::ClassLogits => "class-logits",
            HeadKind::DenseLogits => "dense-logits",
            HeadKind::SaliencyMap => "saliency-map",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class-logits" => Ok(HeadKind::ClassLogits),
            "dense-logits" => Ok(HeadKind::DenseLogits),
            "saliency-map" => Ok(HeadKind::SaliencyMap),
            other => Err(Error::Config(format!("unknown head kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Classes for logit heads; 1 for the saliency head.
    pub output_dim: usize,
    pub head: HeadKind,
    pub activation: Activation,
}

impl ArchDescriptor {
    pub fn classifier(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        ArchDescriptor {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim: classes,
            head: HeadKind::ClassLogits,
            activation: Activation::Relu,
        }
    }

    pub fn dense(channels: usize, hidden: &[usize], classes: usize) -> Self {
        ArchDescriptor {
            input_dim: channels,
            hidden: hidden.to_vec(),
            output_dim: classes,
            head: HeadKind::DenseLogits,
            activation: Activation::Relu,
        }
    }

    pub fn saliency(channels: usize, hidden: &[usize]) -> Self {
        ArchDescriptor {
            input_dim: channels,
            hidden: hidden.to_vec(),
            output_dim: 1,
            head: HeadKind::SaliencyMap,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input and output widths must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.len() > MAX_HIDDEN_LAYERS {
            return bad(format!(
                "need 1..={MAX_HIDDEN_LAYERS} hidden layers, got {}",
                self.hidden.len()
            ));
        }
        if let Some(w) = self.hidden.iter().find(|&&w| w == 0 || w > MAX_WIDTH) {
            return bad(format!("hidden width {w} outside 1..={MAX_WIDTH}"));
        }
        if self.head == HeadKind::SaliencyMap && self.output_dim != 1 {
            return bad("saliency head has exactly one output".into());
        }
        if self.head != HeadKind::SaliencyMap && self.output_dim < 2 {
            return bad("logit heads need at least two classes".into());
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn to_header(&self) -> Vec<(String, String)> {
        let hidden = self
            .hidden
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("arch.input_dim".into(), self.input_dim.to_string()),
            ("arch.hidden".into(), hidden),
            ("arch.output_dim".into(), self.output_dim.to_string()),
            ("arch.head".into(), self.head.to_string()),
            ("arch.activation".into(), "relu".into()),
        ]
    }

    pub fn from_header(c: &Container) -> Result<Self> {
        let get = |k: &str| {
            c.header_value(k)
                .ok_or_else(|| Error::Config(format!("checkpoint header lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint header {k} is not an integer")))
        };
        let hidden = get("arch.hidden")?
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config("bad arch.hidden list".into()))?;
        if get("arch.activation")? != "relu" {
            return Err(Error::Config("only relu activation is supported".into()));
        }
        let arch = ArchDescriptor {
            input_dim: num("arch.input_dim")?,
            hidden,
            output_dim: num("arch.output_dim")?,
            head: get("arch.head")?.parse()?,
            activation: Activation::Relu,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// One participating model: architecture plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub name: String,
    pub arch: ArchDescriptor,
    params: Vec<(String, Tensor)>,
    /// Layer whose activations are exported for representation analysis.
    pub feature_tap: String,
}

fn layer_name(i: usize, n_hidden: usize) -> String {
    if i == n_hidden {
        "head".to_string()
    } else {
        format!("layer{i}")
    }
}

impl ModelBundle {
    /// Glorot-uniform weights, zero biases; deterministic in `seed`.
    pub fn init(name: impl Into<String>, arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_hidden = arch.hidden.len();
        let mut params = Vec::new();
        for (i, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            let prefix = layer_name(i, n_hidden);
            params.push((format!("{prefix}.weight"), Tensor::new(vec![fan_in, fan_out], w)?));
            params.push((format!("{prefix}.bias"), Tensor::zeros(vec![fan_out])));
        }
        Ok(ModelBundle {
            name: name.into(),
            feature_tap: format!("layer{}", n_hidden - 1),
            arch,
            params,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces one parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape("set_param", slot.1.shape(), value.shape()));
        }
        slot.1 = value;
        Ok(())
    }

    pub(crate) fn param_data_mut(&mut self, index: usize) -> &mut [f64] {
        self.params[index].1.data_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over every parameter's little-endian bytes, in order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Disconnects input features outside `visible` by zeroing their
    /// first-layer weights, so the model becomes a function of its view.
    pub fn restrict_inputs(&mut self, visible: &[bool]) -> Result<()> {
        if visible.len() != self.arch.input_dim {
            return Err(Error::shape(
                "restrict_inputs",
                &[self.arch.input_dim],
                &[visible.len()],
            ));
        }
        let fan_out = self.arch.hidden[0];
        let w = self.params[0].1.data_mut();
        for (row, &keep) in visible.iter().enumerate() {
            if !keep {
                w[row * fan_out..(row + 1) * fan_out].fill(0.0);
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape`; frozen bundles get constants.
    pub fn bind<'a, 't>(&'a self, tape: &'t Tape, trainable: bool) -> BoundModel<'a, 't> {
        let params = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundModel {
            model: self,
            params,
        }
    }

    /// Forward values without recording gradients: `(output, features)`.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = match self.arch.head {
            HeadKind::ClassLogits => bound.forward_classifier(xv)?,
            _ => bound.forward_dense(xv)?,
        };
        Ok((out.output.value(), out.features.value()))
    }

    pub fn to_container(&self) -> Container {
        let mut header = vec![
            ("kind".to_string(), "model".to_string()),
            ("name".to_string(), self.name.clone()),
        ];
        header.extend(self.arch.to_header());
        header.push(("feature_tap".into(), self.feature_tap.clone()));
        Container {
            header,
            arrays: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.data().to_vec()))
                .collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header_value("kind") != Some("model") {
            return Err(Error::Config("container does not hold a model".into()));
        }
        let arch = ArchDescriptor::from_header(c)?;
        let name = c.header_value("name").unwrap_or("model").to_string();
        let mut model = ModelBundle::init(name, arch, 0)?;
        if c.arrays.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} arrays, architecture needs {}",
                c.arrays.len(),
                model.params.len()
            )));
        }
        for ((name, slot), (cname, data)) in model.params.iter_mut().zip(&c.arrays) {
            if name != cname || slot.numel() != data.len() {
                return Err(Error::Config(format!(
                    "checkpoint array {cname} does not match parameter {name}"
                )));
            }
            slot.data_mut().copy_from_slice(data);
        }
        if let Some(tap) = c.header_value("feature_tap") {
            model.feature_tap = tap.to_string();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("checkpoint {} not found", path.display())));
        }
        Self::from_container(&Container::read(path)?)
    }
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward<'t> {
    /// Logits (`[N, C]` or `[N, H, W, C]`) or saliency map (`[N, H, W]`).
    pub output: Var<'t>,
    /// Activations of the feature tap, one row per input row or pixel.
    pub features: Var<'t>,
}

/// A model whose parameters are recorded on a tape.
pub struct BoundModel<'a, 't> {
    pub model: &'a ModelBundle,
    pub params: Vec<Var<'t>>,
}

impl<'t> BoundModel<'_, 't> {
    fn mlp(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n_hidden = self.model.arch.hidden.len();
        let mut h = x;
        let mut features = x;
        for layer in 0..=n_hidden {
            let w = self.params[2 * layer];
            let b = self.params[2 * layer + 1];
            h = h.matmul(w)?.add_bias(b)?;
            if layer < n_hidden {
                h = h.relu()?;
                features = h;
            }
        }
        Ok((h, features))
    }

    pub fn forward_classifier(&self, x: Var<'t>) -> Result<Forward<'t>> {
        let arch = &self.model.arch;
        if arch.head != HeadKind::ClassLogits {
            return Err(Error::Config(format!(
                "{} head cannot run as a classifier",
                arch.head
            )));
        }
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != arch.input_dim {
            return Err(Error::shape("forward_classifier", &shape, &[0, arch.input_dim]));
        }
        let (output, features) = self.mlp(x)?;
        Ok(Forward { output, features })
    }

    /// Applies the shared MLP to every pixel of `x: [N, H, W, D]`.
    pub fn forward_dense(&self, x: Var<'t>) -> Result<Forward<'t>> {
        let arch = &self.model.arch;
        let shape = x.shape();
        if shape.len() != 4 || shape[3] != arch.input_dim {
            return Err(Error::shape("forward_dense", &shape, &[0, 0, 0, arch.input_dim]));
        }
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let flat = x.reshape(vec![n * h * w, arch.input_dim])?;
        let (out, features) = self.mlp(flat)?;
        let output = match arch.head {
            HeadKind::DenseLogits => out.reshape(vec![n, h, w, arch.output_dim])?,
            HeadKind::SaliencyMap => out.sigmoid()?.reshape(vec![n, h, w])?,
            HeadKind::ClassLogits => {
                return Err(Error::Config("class-logits head cannot run densely".into()))
            }
        };
        Ok(Forward { output, features })
    }
}

pub fn init_model(arch: ArchDescriptor, seed: u64) -> Result<ModelBundle> {
    ModelBundle::init("model", arch, seed)
}

pub fn forward_classifier<'t>(m: &BoundModel<'_, 't>, x: Var<'t>) -> Result<Forward<'t>> {
    m.forward_classifier(x)
}

pub fn forward_dense<'t>(m: &BoundModel<'_, 't>, x: Var<'t>) -> Result<Forward<'t>> {
    m.forward_dense(x)
}
