//! Declarative model description and its key/value text format.
//!
//! ```text
//! # comment
//! input = 4
//! loss = cross_entropy          # or: mse
//! sharing = shared              # or: unrolled
//! weight_decay = 5e-4
//! layer = dense 16 tanh         # width, activation [nobias]
//! layer = tied 2 tanh           # reuse count M, activation [nobias]
//! layer = dense 3 identity
//! ```
//!
//! A `tied` layer is a square weight matrix (and bias) applied `M` times in a
//! row to the current hidden state.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::ParamPartition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
    /// Piecewise linear: its second derivative vanishes almost everywhere, so
    /// curvature comes only from the loss head.
    Relu,
}

impl Activation {
    pub fn is_curvature_degenerate(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// A tied parameter is one tape leaf referenced at every use site.
    Shared,
    /// Each use site gets its own leaf; cross-instance curvature is dropped.
    Unrolled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        width: usize,
        activation: Activation,
        bias: bool,
    },
    Tied {
        reuse: usize,
        activation: Activation,
        bias: bool,
    },
}

impl LayerSpec {
    pub fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Tied { activation, .. } => activation,
        }
    }

    pub fn has_bias(&self) -> bool {
        match *self {
            LayerSpec::Dense { bias, .. } | LayerSpec::Tied { bias, .. } => bias,
        }
    }

    pub fn reuse(&self) -> usize {
        match *self {
            LayerSpec::Dense { .. } => 1,
            LayerSpec::Tied { reuse, .. } => reuse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
    pub sharing: SharingMode,
    pub weight_decay: f64,
}

/// Shape of one layer's parameters: weight `fan_in × fan_out`, optional bias row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
    pub reuse: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn len(&self) -> usize {
        self.weight_len() + if self.bias { self.fan_out } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    /// Two tanh hidden layers of width 32 and a linear softmax head.
    pub fn mlp_small(input: usize, classes: usize) -> Self {
        Self {
            input,
            layers: vec![
                LayerSpec::Dense {
                    width: 32,
                    activation: Activation::Tanh,
                    bias: true,
                },
                LayerSpec::Dense {
                    width: 32,
                    activation: Activation::Tanh,
                    bias: true,
                },
                LayerSpec::Dense {
                    width: classes,
                    activation: Activation::Identity,
                    bias: true,
                },
            ],
            loss: LossKind::CrossEntropy,
            sharing: SharingMode::Shared,
            weight_decay: 0.0,
        }
    }

    /// A tanh input layer, one 16×16 weight matrix applied twice, linear head.
    pub fn mlp_tied(input: usize, classes: usize) -> Self {
        Self {
            input,
            layers: vec![
                LayerSpec::Dense {
                    width: 16,
                    activation: Activation::Tanh,
                    bias: true,
                },
                LayerSpec::Tied {
                    reuse: 2,
                    activation: Activation::Tanh,
                    bias: true,
                },
                LayerSpec::Dense {
                    width: classes,
                    activation: Activation::Identity,
                    bias: true,
                },
            ],
            loss: LossKind::CrossEntropy,
            sharing: SharingMode::Shared,
            weight_decay: 0.0,
        }
    }

    pub fn architecture(name: &str, input: usize, classes: usize) -> Result<Self> {
        match name {
            "mlp-small" => Ok(Self::mlp_small(input, classes)),
            "mlp-tied" => Ok(Self::mlp_tied(input, classes)),
            other => Err(Error::InvalidModel(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn with_weight_decay(mut self, lambda: f64) -> Self {
        self.weight_decay = lambda;
        self
    }

    pub fn with_sharing(mut self, sharing: SharingMode) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        if self.input == 0 {
            return bad("input dimension must be positive".into());
        }
        if self.layers.is_empty() {
            return bad("at least one layer is required".into());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { width: 0, .. } => {
                    return bad(format!("layer {i}: width must be positive"))
                }
                LayerSpec::Tied { reuse: 0, .. } => {
                    return bad(format!("layer {i}: reuse count must be positive"))
                }
                _ => {}
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be finite and >= 0", self.weight_decay));
        }
        if self.sharing == SharingMode::Unrolled && self.max_reuse() < 2 {
            return bad("unrolled sharing needs a tied layer with reuse >= 2".into());
        }
        if self.loss == LossKind::CrossEntropy && self.output_dim() < 2 {
            return bad("cross-entropy needs at least two outputs".into());
        }
        Ok(())
    }

    pub fn max_reuse(&self) -> usize {
        self.layers.iter().map(LayerSpec::reuse).max().unwrap_or(0)
    }

    pub fn has_tied(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Tied { .. }))
    }

    pub fn output_dim(&self) -> usize {
        self.shapes().last().map_or(self.input, |s| s.fan_out)
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        let mut width = self.input;
        self.layers
            .iter()
            .map(|layer| {
                let fan_out = match *layer {
                    LayerSpec::Dense { width, .. } => width,
                    LayerSpec::Tied { .. } => width,
                };
                let s = LayerShape {
                    fan_in: width,
                    fan_out,
                    bias: layer.has_bias(),
                    reuse: layer.reuse(),
                };
                width = fan_out;
                s
            })
            .collect()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Dense { .. } => format!("dense{i}"),
                LayerSpec::Tied { .. } => format!("tied{i}"),
            })
            .collect()
    }

    /// Shared coordinates: one group per layer.
    pub fn partition(&self) -> ParamPartition {
        ParamPartition::from_sizes(
            self.layer_names()
                .into_iter()
                .zip(self.shapes())
                .map(|(n, s)| (n, s.len())),
        )
    }

    /// Unrolled coordinates: every use site of a tied layer is its own group,
    /// named `<layer>#<copy>`.
    pub fn expanded_partition(&self) -> ParamPartition {
        let mut sizes = Vec::new();
        for (name, shape) in self.layer_names().into_iter().zip(self.shapes()) {
            if shape.reuse > 1 {
                for k in 0..shape.reuse {
                    sizes.push((format!("{name}#{k}"), shape.len()));
                }
            } else {
                sizes.push((name, shape.len()));
            }
        }
        ParamPartition::from_sizes(sizes)
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(LayerShape::len).sum()
    }

    /// Copies each tied layer's parameters into all of its virtual copies.
    pub fn expand(&self, params: &[f64]) -> Result<Vec<f64>> {
        let part = self.partition();
        if params.len() != part.total() {
            return Err(Error::LengthMismatch {
                expected: part.total(),
                got: params.len(),
            });
        }
        let mut out = Vec::with_capacity(self.expanded_partition().total());
        for (g, shape) in part.groups().iter().zip(self.shapes()) {
            let copies = if shape.reuse > 1 { shape.reuse } else { 1 };
            for _ in 0..copies {
                out.extend_from_slice(&params[g.range()]);
            }
        }
        Ok(out)
    }

    /// Sums the virtual copies back into shared coordinates.
    pub fn fold(&self, expanded: &[f64]) -> Result<Vec<f64>> {
        let exp = self.expanded_partition();
        if expanded.len() != exp.total() {
            return Err(Error::LengthMismatch {
                expected: exp.total(),
                got: expanded.len(),
            });
        }
        let part = self.partition();
        let mut out = vec![0.0; part.total()];
        let mut cursor = 0;
        for (g, shape) in part.groups().iter().zip(self.shapes()) {
            let copies = if shape.reuse > 1 { shape.reuse } else { 1 };
            for _ in 0..copies {
                for (o, x) in out[g.range()].iter_mut().zip(&expanded[cursor..cursor + g.len]) {
                    *o += x;
                }
                cursor += g.len;
            }
        }
        Ok(out)
    }

    /// LeCun-normal weights, zero biases; deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.param_count());
        for s in self.shapes() {
            let scale = 1.0 / (s.fan_in as f64).sqrt();
            for _ in 0..s.weight_len() {
                let n: f64 = StandardNormal.sample(&mut rng);
                out.push(scale * n);
            }
            if s.bias {
                out.extend(std::iter::repeat_n(0.0, s.fan_out));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut loss = LossKind::CrossEntropy;
        let mut sharing = SharingMode::Shared;
        let mut weight_decay = 0.0;
        let mut layers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |message: String| Error::ModelParse {
                line: line_no,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "input" => {
                    input = Some(
                        value
                            .parse::<usize>()
                            .map_err(|e| err(format!("input: {e}")))?,
                    )
                }
                "loss" => {
                    loss = match value {
                        "cross_entropy" => LossKind::CrossEntropy,
                        "mse" => LossKind::Mse,
                        other => return Err(err(format!("unknown loss `{other}`"))),
                    }
                }
                "sharing" => {
                    sharing = match value {
                        "shared" => SharingMode::Shared,
                        "unrolled" => SharingMode::Unrolled,
                        other => return Err(err(format!("unknown sharing mode `{other}`"))),
                    }
                }
                "weight_decay" => {
                    weight_decay = value
                        .parse::<f64>()
                        .map_err(|e| err(format!("weight_decay: {e}")))?
                }
                "layer" => layers.push(parse_layer(value).map_err(err)?),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let spec = Self {
            input: input.ok_or(Error::ModelParse {
                line: 0,
                message: "missing `input`".into(),
            })?,
            layers,
            loss,
            sharing,
            weight_decay,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_layer(value: &str) -> std::result::Result<LayerSpec, String> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    let (kind, count, act, rest) = match parts.as_slice() {
        [kind, count, act, rest @ ..] => (*kind, *count, *act, rest),
        _ => return Err(format!("layer needs `<kind> <n> <activation>`, got `{value}`")),
    };
    let n: usize = count
        .parse()
        .map_err(|e| format!("layer count `{count}`: {e}"))?;
    let activation: Activation = act.parse()?;
    let bias = match rest {
        [] => true,
        ["nobias"] => false,
        other => return Err(format!("unexpected layer options {other:?}")),
    };
    match kind {
        "dense" => Ok(LayerSpec::Dense {
            width: n,
            activation,
            bias,
        }),
        "tied" => Ok(LayerSpec::Tied {
            reuse: n,
            activation,
            bias,
        }),
        other => Err(format!("unknown layer kind `{other}`")),
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input = {}", self.input)?;
        writeln!(
            f,
            "loss = {}",
            match self.loss {
                LossKind::CrossEntropy => "cross_entropy",
                LossKind::Mse => "mse",
            }
        )?;
        writeln!(
            f,
            "sharing = {}",
            match self.sharing {
                SharingMode::Shared => "shared",
                SharingMode::Unrolled => "unrolled",
            }
        )?;
        writeln!(f, "weight_decay = {:e}", self.weight_decay)?;
        for layer in &self.layers {
            let (kind, n) = match *layer {
                LayerSpec::Dense { width, .. } => ("dense", width),
                LayerSpec::Tied { reuse, .. } => ("tied", reuse),
            };
            let suffix = if layer.has_bias() { "" } else { " nobias" };
            writeln!(f, "layer = {kind} {n} {}{suffix}", layer.activation())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_round_trip() {
        let text = "input = 4\nloss = mse\nsharing = unrolled\nweight_decay = 5e-4\n\
                    layer = dense 8 tanh\nlayer = tied 3 softplus nobias # comment\n\
                    layer = dense 1 identity\n";
        let spec = ModelSpec::parse(text).unwrap();
        assert_eq!(spec.layers.len(), 3);
        assert_eq!(spec.max_reuse(), 3);
        assert_eq!(ModelSpec::parse(&spec.to_string()).unwrap(), spec);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ModelSpec::parse("input = 2\nlayer = dense 2 cosine\n").unwrap_err();
        assert!(matches!(err, Error::ModelParse { line: 2, .. }), "{err}");
        let err = ModelSpec::parse("input = 2\nbogus\n").unwrap_err();
        assert!(matches!(err, Error::ModelParse { line: 2, .. }));
    }

    #[test]
    fn unrolled_requires_reuse() {
        let spec = ModelSpec::mlp_small(3, 2).with_sharing(SharingMode::Unrolled);
        assert!(spec.validate().is_err());
        let tied = ModelSpec::mlp_tied(3, 2).with_sharing(SharingMode::Unrolled);
        assert!(tied.validate().is_ok());
    }

    #[test]
    fn partitions_and_expansion() {
        let spec = ModelSpec::mlp_tied(3, 2);
        let p = spec.partition();
        assert_eq!(p.layers(), 3);
        assert_eq!(p.total(), 3 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2);
        let e = spec.expanded_partition();
        assert_eq!(e.layers(), 4);
        assert_eq!(e.total(), p.total() + 16 * 16 + 16);
        let theta = spec.init_params(7);
        let ex = spec.expand(&theta).unwrap();
        let folded = spec.fold(&ex).unwrap();
        for (i, (f, t)) in folded.iter().zip(&theta).enumerate() {
            let copies = if p.range(1).unwrap().contains(&i) { 2.0 } else { 1.0 };
            assert_eq!(*f, copies * t);
        }
    }

    #[test]
    fn mlp_small_size() {
        let spec = ModelSpec::mlp_small(8, 4);
        assert_eq!(spec.param_count(), 8 * 32 + 32 + 32 * 32 + 32 + 32 * 4 + 4);
        assert!(spec.param_count() <= 5000);
        assert_eq!(spec.init_params(1), spec.init_params(1));
    }

    #[test]
    fn relu_is_flagged_degenerate() {
        assert!(Activation::Relu.is_curvature_degenerate());
        assert!(!Activation::Tanh.is_curvature_degenerate());
    }
}
