//! Filter-wise feature map scaling.
//!
//! A block's output `c` `[B, T, F]` is summarised by a time average, passed
//! through a dense layer and a sigmoid to give one scale per filter, and
//! the scale is then combined with `c` additively, multiplicatively or both.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::fully_connected;
use crate::tensor::{Graph, Real, ReduceOp, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FmsKind {
    /// `c + s`
    Add,
    /// `c * s`
    Mul,
    /// `(c + s) * s`
    AddMul,
    /// `c * s + s`
    MulAdd,
    /// `c * s1 + s2` with two independently derived vectors.
    MulAddSeparate,
}

impl FmsKind {
    pub const ALL: [FmsKind; 5] = [
        FmsKind::Add,
        FmsKind::Mul,
        FmsKind::AddMul,
        FmsKind::MulAdd,
        FmsKind::MulAddSeparate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FmsKind::Add => "add",
            FmsKind::Mul => "mul",
            FmsKind::AddMul => "add_mul",
            FmsKind::MulAdd => "mul_add",
            FmsKind::MulAddSeparate => "mul_add_sep",
        }
    }

    /// Number of scale vectors the kind consumes.
    pub fn vectors(self) -> usize {
        if self == FmsKind::MulAddSeparate {
            2
        } else {
            1
        }
    }

    /// Parse a config value; `"none"` yields `None`.
    pub fn parse_optional(s: &str) -> Result<Option<FmsKind>> {
        if s == "none" {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    }
}

impl fmt::Display for FmsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FmsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FmsKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown fms kind {s:?}, expected none, add, mul, add_mul, mul_add or mul_add_sep"
                ))
            })
    }
}

/// Per-filter scales, each strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVector(Vec<Real>);

impl ScaleVector {
    pub fn new(values: Vec<Real>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("empty scale vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain(format!("scale {v} outside (0, 1)")));
        }
        Ok(ScaleVector(values))
    }

    pub fn values(&self) -> &[Real] {
        &self.0
    }
}

/// Dense layer weights for one scale vector: `s = sigmoid(mean_t(c) W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleLayer {
    /// `[F, F]`
    pub weights: Tensor,
    /// `[F]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmsParams {
    pub scale: ScaleLayer,
    /// Only for [`FmsKind::MulAddSeparate`].
    pub second: Option<ScaleLayer>,
}

impl FmsParams {
    fn layers(&self, kind: FmsKind) -> Result<Vec<&ScaleLayer>> {
        match (kind.vectors(), &self.second) {
            (1, _) => Ok(vec![&self.scale]),
            (_, Some(second)) => Ok(vec![&self.scale, second]),
            _ => Err(Error::Shape(format!("{kind} needs a second scale layer"))),
        }
    }
}

/// Graph handles of a [`ScaleLayer`].
#[derive(Clone, Copy, Debug)]
pub struct ScaleVars {
    pub weights: Var,
    pub bias: Var,
}

/// `sigmoid(mean_t(c) W + b)` for `c` `[B, T, F]`, giving `[B, F]`.
pub fn derive_scale(g: &mut Graph, c: Var, layer: ScaleVars) -> Result<Var> {
    let f = match g.shape(c) {
        &[_, _, f] => f,
        other => {
            return Err(Error::Shape(format!(
                "fms expects [B, T, F], got {other:?}"
            )))
        }
    };
    if g.shape(layer.weights) != [f, f] {
        return Err(Error::Shape(format!(
            "fms weights {:?} do not match {f} filters",
            g.shape(layer.weights)
        )));
    }
    let pooled = g.reduce(ReduceOp::Mean, c, 1)?;
    let logits = fully_connected(g, pooled, layer.weights, layer.bias)?;
    g.sigmoid(logits)
}

/// Combine `c` `[B, T, F]` with scales `[B, F]` broadcast over time.
/// `s2` is used only by [`FmsKind::MulAddSeparate`].
pub fn combine(g: &mut Graph, c: Var, kind: FmsKind, s1: Var, s2: Option<Var>) -> Result<Var> {
    match kind {
        FmsKind::Add => g.add(c, s1),
        FmsKind::Mul => g.mul(c, s1),
        FmsKind::AddMul => {
            let shifted = g.add(c, s1)?;
            g.mul(shifted, s1)
        }
        FmsKind::MulAdd => {
            let scaled = g.mul(c, s1)?;
            g.add(scaled, s1)
        }
        FmsKind::MulAddSeparate => {
            let s2 =
                s2.ok_or_else(|| Error::Shape("mul_add_sep needs two scale vectors".into()))?;
            let scaled = g.mul(c, s1)?;
            g.add(scaled, s2)
        }
    }
}

/// Derive the scale vector(s) once from `c` and apply them.
pub fn apply_fms_graph(g: &mut Graph, c: Var, kind: FmsKind, layers: &[ScaleVars]) -> Result<Var> {
    if layers.len() != kind.vectors() {
        return Err(Error::Shape(format!(
            "{kind} needs {} scale layers, got {}",
            kind.vectors(),
            layers.len()
        )));
    }
    let s1 = derive_scale(g, c, layers[0])?;
    let s2 = match layers.get(1) {
        Some(&l) => Some(derive_scale(g, c, l)?),
        None => None,
    };
    combine(g, c, kind, s1, s2)
}

fn bind(g: &mut Graph, layer: &ScaleLayer) -> ScaleVars {
    ScaleVars {
        weights: g.constant(layer.weights.clone()),
        bias: g.constant(layer.bias.clone()),
    }
}

fn as_batch(g: &mut Graph, c: &Tensor) -> Result<Var> {
    if c.rank() != 2 {
        return Err(Error::Shape(format!(
            "feature map must be [T, F], got {:?}",
            c.shape()
        )));
    }
    let shape = vec![1, c.shape()[0], c.shape()[1]];
    Ok(g.constant(c.clone().reshape(shape)?))
}

/// Scale vector of a single feature map `[T, F]`.
pub fn derive_scale_map(c: &Tensor, layer: &ScaleLayer) -> Result<ScaleVector> {
    let mut g = Graph::new();
    let cv = as_batch(&mut g, c)?;
    let l = bind(&mut g, layer);
    let s = derive_scale(&mut g, cv, l)?;
    ScaleVector::new(g.value(s).data().to_vec())
}

/// Apply feature map scaling to a single feature map `[T, F]`.
pub fn apply_fms(c: &Tensor, kind: FmsKind, p: &FmsParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let cv = as_batch(&mut g, c)?;
    let layers: Vec<ScaleVars> = p
        .layers(kind)?
        .into_iter()
        .map(|l| bind(&mut g, l))
        .collect();
    let y = apply_fms_graph(&mut g, cv, kind, &layers)?;
    g.value(y).clone().reshape(c.shape().to_vec())
}
