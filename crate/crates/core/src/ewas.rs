//! Element-wise activation scaling.
//!
//! An auxiliary linear classifier (ALC) scores the flattened activation
//! `z` of a host layer. Its weight matrix θ is `(C·H·W) × K`; column `k`
//! reshaped back to `C×H×W` is the scaling mask for class `k`. The mask
//! class is the ground-truth label while training and the ALC argmax at
//! inference. The scaled activation `z ⊗ m` replaces `z` downstream, and
//! the scores feed the auxiliary loss.
//!
//! Flattening is channel-major, then row, then column, which is exactly
//! the row-major storage order of a `C×H×W` tensor. Flatten and reformat
//! therefore never move data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax_lowest, Graph, Tensor, Var};

/// How the mask class is chosen for each sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Use the ground-truth label.
    Training,
    /// Use the argmax of the ALC scores, lowest index on ties.
    #[default]
    Inference,
}

/// Activation geometry of a host layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ActivationShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Flattens one `C×H×W` activation into a length-CHW vector.
pub fn flatten_chw(z: &Tensor) -> Result<Vec<f64>> {
    if z.shape().len() != 3 {
        return Err(Error::shape(
            "flatten",
            format!("expected C×H×W, got {:?}", z.shape()),
        ));
    }
    Ok(z.data().to_vec())
}

/// Inverse of [`flatten_chw`].
pub fn reformat_chw(v: &[f64], shape: ActivationShape) -> Result<Tensor> {
    Tensor::new(shape.dims(), v.to_vec())
}

/// Weights of one auxiliary linear classifier; no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct AlcParams {
    pub shape: ActivationShape,
    pub num_classes: usize,
    /// `(C·H·W) × K`, row-major.
    pub weights: Tensor,
}

impl AlcParams {
    pub fn new(shape: ActivationShape, num_classes: usize, weights: Vec<f64>) -> Result<Self> {
        let weights = Tensor::new([shape.numel(), num_classes], weights)?;
        Ok(Self {
            shape,
            num_classes,
            weights,
        })
    }

    /// Column `class` reformatted to `C×H×W`.
    pub fn mask(&self, class: usize) -> Result<Tensor> {
        if class >= self.num_classes {
            return Err(Error::Index {
                what: "ALC classes",
                index: class,
                bound: self.num_classes,
            });
        }
        let k = self.num_classes;
        let column: Vec<f64> = self
            .weights
            .data()
            .iter()
            .skip(class)
            .step_by(k)
            .copied()
            .collect();
        reformat_chw(&column, self.shape)
    }
}

/// Per-sample masks chosen by [`select_mask`].
#[derive(Clone, Debug)]
pub struct ScalingMask {
    /// Selected class per sample.
    pub classes: Vec<usize>,
    /// `B×C×H×W` stack of the selected columns.
    pub mask: Var,
}

/// Everything one EWAS module produces on a forward pass.
#[derive(Clone, Debug)]
pub struct EwasOutput {
    pub scaled: Var,
    pub scores: Var,
    pub classes: Vec<usize>,
}

fn activation_shape(g: &Graph, z: Var, host: &str) -> Result<(usize, ActivationShape)> {
    match *g.shape(z) {
        [b, c, h, w] => Ok((
            b,
            ActivationShape {
                channels: c,
                height: h,
                width: w,
            },
        )),
        ref s => Err(Error::shape(
            "ewas",
            format!("activation at `{host}` must be B×C×H×W, got {s:?}"),
        )),
    }
}

/// ALC scores `ŝ = flatten(z) · θ`, one row per sample.
pub fn alc_score(g: &mut Graph, z: Var, theta: Var, host: &str) -> Result<Var> {
    let (batch, shape) = activation_shape(g, z, host)?;
    let rows = g.shape(theta).first().copied().unwrap_or(0);
    if g.shape(theta).len() != 2 || rows != shape.numel() {
        return Err(Error::shape(
            "alc_score",
            format!(
                "layer `{host}` produces C·H·W = {} but the ALC expects {:?}",
                shape.numel(),
                g.shape(theta)
            ),
        ));
    }
    let flat = g.reshape(z, &[batch, shape.numel()])?;
    g.matmul(flat, theta)
}

/// Chooses each sample's mask column. The index is a constant for
/// differentiation; gradient reaches only the selected column's values.
pub fn select_mask(
    g: &mut Graph,
    theta: Var,
    scores: Var,
    labels: Option<&[usize]>,
    mode: MaskMode,
    shape: ActivationShape,
) -> Result<ScalingMask> {
    let [batch, k] = *g.shape(scores) else {
        return Err(Error::shape(
            "select_mask",
            format!("scores must be B×K, got {:?}", g.shape(scores)),
        ));
    };
    let classes = match mode {
        MaskMode::Training => {
            let labels = labels.ok_or_else(|| {
                Error::Mode("training-mode mask selection requires labels".into())
            })?;
            if labels.len() != batch {
                return Err(Error::shape(
                    "select_mask",
                    format!("{} labels for a batch of {batch}", labels.len()),
                ));
            }
            labels.to_vec()
        }
        MaskMode::Inference => g.value(scores).chunks(k).map(argmax_lowest).collect(),
    };
    let columns = g.gather_columns(theta, &classes)?;
    let mask = g.reshape(columns, &[batch, shape.channels, shape.height, shape.width])?;
    Ok(ScalingMask { classes, mask })
}

/// `z̃ = z ⊗ m`.
pub fn apply_scaling(g: &mut Graph, z: Var, mask: &ScalingMask) -> Result<Var> {
    g.mul(z, mask.mask)
}

/// ALC scoring, mask selection and scaling in one step.
pub fn ewas_forward(
    g: &mut Graph,
    z: Var,
    theta: Var,
    labels: Option<&[usize]>,
    mode: MaskMode,
    host: &str,
) -> Result<EwasOutput> {
    let (_, shape) = activation_shape(g, z, host)?;
    let scores = alc_score(g, z, theta, host)?;
    let mask = select_mask(g, theta, scores, labels, mode, shape)?;
    let scaled = apply_scaling(g, z, &mask)?;
    Ok(EwasOutput {
        scaled,
        scores,
        classes: mask.classes,
    })
}
