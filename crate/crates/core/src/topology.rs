//! Layer-string notation such as `Input-15C3-AvgPool2-40C3-AvgPool2-Flatten-300FC-10FC`.
//!
//! Grammar: `-`-separated tokens, the first being `Input`, then any of
//! `<n>C<k>` (n output channels, k×k kernel), `AvgPool2`, `MaxPool2`,
//! `Flatten`, `<n>FC`. An `FC` token on a spatial input flattens implicitly.
//! Convolutions use stride 1 and "same" padding (`k / 2`) unless the caller
//! overrides padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv(ConvSpec),
    AvgPool2,
    MaxPool2,
    Flatten,
    Fc { inputs: usize, outputs: usize },
}

/// A layer with its per-sample input and output shapes resolved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub kind: LayerKind,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl LayerPlan {
    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv(_) | LayerKind::Fc { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Token {
    Conv { channels: usize, kernel: usize },
    AvgPool2,
    MaxPool2,
    Flatten,
    Fc(usize),
}

fn lex(position: usize, text: &str) -> Result<Token> {
    let bad = |detail: &str| Error::Topology {
        position,
        token: text.to_string(),
        detail: detail.to_string(),
    };
    match text {
        "AvgPool2" => return Ok(Token::AvgPool2),
        "MaxPool2" => return Ok(Token::MaxPool2),
        "Flatten" => return Ok(Token::Flatten),
        _ => {}
    }
    if let Some(n) = text.strip_suffix("FC") {
        let n: usize = n.parse().map_err(|_| bad("expected <n>FC"))?;
        if n == 0 {
            return Err(bad("layer width must be positive"));
        }
        return Ok(Token::Fc(n));
    }
    if let Some((n, k)) = text.split_once('C') {
        let channels: usize = n.parse().map_err(|_| bad("expected <n>C<k>"))?;
        let kernel: usize = k.parse().map_err(|_| bad("expected <n>C<k>"))?;
        if channels == 0 || kernel == 0 {
            return Err(bad("channels and kernel must be positive"));
        }
        return Ok(Token::Conv { channels, kernel });
    }
    Err(bad("unknown layer token"))
}

/// Parses `text` for inputs of shape `[channels, height, width]`.
///
/// Token positions in errors are 1-based, counting `Input` as token 1.
pub fn parse_topology(text: &str, input_shape: [usize; 3]) -> Result<Vec<LayerPlan>> {
    parse_topology_with_padding(text, input_shape, None)
}

/// As [`parse_topology`], with every convolution using `padding` instead of
/// `k / 2`.
pub fn parse_topology_with_padding(
    text: &str,
    input_shape: [usize; 3],
    padding: Option<usize>,
) -> Result<Vec<LayerPlan>> {
    let mut tokens = text.trim().split('-');
    match tokens.next() {
        Some("Input") => {}
        other => {
            return Err(Error::Topology {
                position: 1,
                token: other.unwrap_or_default().to_string(),
                detail: "topology must start with `Input`".into(),
            })
        }
    }
    let mut shape = input_shape.to_vec();
    let mut plans = Vec::new();
    for (i, raw) in tokens.enumerate() {
        let position = i + 2;
        let token = lex(position, raw)?;
        let inconsistent = |detail: String| Error::Topology {
            position,
            token: raw.to_string(),
            detail,
        };
        let (kind, out_shape) = match token {
            Token::Conv { channels, kernel } => {
                if shape.len() != 3 {
                    return Err(inconsistent(format!(
                        "convolution needs a spatial input, got {shape:?}"
                    )));
                }
                let mut spec = ConvSpec::same(shape[0], channels, kernel);
                if let Some(p) = padding {
                    spec.padding = p;
                }
                let oh = spec
                    .output_extent(shape[1])
                    .map_err(|e| inconsistent(e.to_string()))?;
                let ow = spec
                    .output_extent(shape[2])
                    .map_err(|e| inconsistent(e.to_string()))?;
                (LayerKind::Conv(spec), vec![channels, oh, ow])
            }
            Token::AvgPool2 | Token::MaxPool2 => {
                if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                    return Err(inconsistent(format!(
                        "2x2 pooling needs even spatial extents, got {shape:?}"
                    )));
                }
                let kind = if token == Token::AvgPool2 {
                    LayerKind::AvgPool2
                } else {
                    LayerKind::MaxPool2
                };
                (kind, vec![shape[0], shape[1] / 2, shape[2] / 2])
            }
            Token::Flatten => (LayerKind::Flatten, vec![shape.iter().product()]),
            Token::Fc(outputs) => {
                if shape.len() != 1 {
                    let flat = shape.iter().product();
                    plans.push(LayerPlan {
                        kind: LayerKind::Flatten,
                        in_shape: shape.clone(),
                        out_shape: vec![flat],
                    });
                    shape = vec![flat];
                }
                (
                    LayerKind::Fc {
                        inputs: shape[0],
                        outputs,
                    },
                    vec![outputs],
                )
            }
        };
        plans.push(LayerPlan {
            kind,
            in_shape: shape.clone(),
            out_shape: out_shape.clone(),
        });
        shape = out_shape;
    }
    if !plans.iter().any(LayerPlan::has_params) {
        return Err(Error::Topology {
            position: 1,
            token: text.to_string(),
            detail: "topology has no trainable layer".into(),
        });
    }
    if shape.len() != 1 {
        return Err(Error::Topology {
            position: plans.len() + 1,
            token: text.rsplit('-').next().unwrap_or_default().to_string(),
            detail: "topology must end in a fully-connected layer".into(),
        });
    }
    Ok(plans)
}
