//! Layer vocabulary and network architectures.
//!
//! A spec is written as `HxWxC:layer,layer,...` with layers `convN` (3×3,
//! stride 1, zero padding 1, N output channels), `ln` (layer normalisation
//! over all features of a sample, per-channel affine), `relu`, `avgpool`
//! (global average pool) and `denseN`. For example the desk default is
//! `16x16x3:conv16,ln,relu,conv16,ln,relu,avgpool,dense16,relu,dense3`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3x3 { out: usize },
    LayerNorm,
    Relu,
    AvgPool,
    Dense { out: usize },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv3x3 { .. } | LayerSpec::LayerNorm | LayerSpec::Dense { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv3x3 { out } => write!(f, "conv{out}"),
            LayerSpec::LayerNorm => f.write_str("ln"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::AvgPool => f.write_str("avgpool"),
            LayerSpec::Dense { out } => write!(f, "dense{out}"),
        }
    }
}

/// Activation shape of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Spatial { h, w, c } => h * w * c,
            Shape::Flat(f) => f,
        }
    }

    /// Size of the trailing (channel) axis.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Spatial { c, .. } => c,
            Shape::Flat(f) => f,
        }
    }
}

/// A layer with its resolved shapes and parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedLayer {
    pub kind: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    /// Offset of the layer's block in the flat parameter vector.
    pub offset: usize,
    /// Weights first, then biases (or scales then shifts).
    pub weights: usize,
    pub biases: usize,
    /// Index among the parameterized layers.
    pub param_layer: Option<usize>,
}

impl PlannedLayer {
    pub fn param_len(&self) -> usize {
        self.weights + self.biases
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    input: Shape,
    layers: Vec<PlannedLayer>,
    param_count: usize,
    param_layers: usize,
}

impl NetworkSpec {
    pub fn new(input: (usize, usize, usize), layers: &[LayerSpec]) -> Result<Self> {
        let (h, w, c) = input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("network input dimensions must be positive"));
        }
        let input = Shape::Spatial { h, w, c };
        let mut shape = input;
        let mut planned = Vec::with_capacity(layers.len());
        let mut offset = 0;
        let mut param_layers = 0;
        for (i, &kind) in layers.iter().enumerate() {
            let (output, weights, biases) = match (kind, shape) {
                (LayerSpec::Conv3x3 { out }, Shape::Spatial { h, w, c }) if out > 0 => {
                    (Shape::Spatial { h, w, c: out }, 9 * c * out, out)
                }
                (LayerSpec::Conv3x3 { .. }, Shape::Flat(_)) => {
                    return Err(Error::invalid(format!("layer {i} ({kind}) needs a spatial input")))
                }
                (LayerSpec::LayerNorm, s) => (s, s.channels(), s.channels()),
                (LayerSpec::Relu, s) => (s, 0, 0),
                (LayerSpec::AvgPool, Shape::Spatial { c, .. }) => (Shape::Flat(c), 0, 0),
                (LayerSpec::AvgPool, Shape::Flat(_)) => {
                    return Err(Error::invalid(format!("layer {i} (avgpool) needs a spatial input")))
                }
                (LayerSpec::Dense { out }, s) if out > 0 => (Shape::Flat(out), s.size() * out, out),
                _ => return Err(Error::invalid(format!("layer {i} ({kind}) has zero width"))),
            };
            let param_layer = kind.has_params().then(|| {
                param_layers += 1;
                param_layers - 1
            });
            planned.push(PlannedLayer {
                kind,
                input: shape,
                output,
                offset,
                weights,
                biases,
                param_layer,
            });
            offset += weights + biases;
            shape = output;
        }
        if shape != Shape::Flat(3) {
            return Err(Error::Shape {
                expected: "3 outputs".into(),
                actual: format!("{shape:?}"),
            });
        }
        Ok(Self {
            input,
            layers: planned,
            param_count: offset,
            param_layers,
        })
    }

    /// Two 3×3×16 conv blocks, global pool, dense 16 and dense 3.
    pub fn desk(size: usize) -> Self {
        use LayerSpec::*;
        Self::new(
            (size, size, 3),
            &[
                Conv3x3 { out: 16 },
                LayerNorm,
                Relu,
                Conv3x3 { out: 16 },
                LayerNorm,
                Relu,
                AvgPool,
                Dense { out: 16 },
                Relu,
                Dense { out: 3 },
            ],
        )
        .expect("desk spec is valid")
    }

    /// Four 3×3×64 conv blocks, global pool, dense 64 and dense 3.
    pub fn full(size: usize) -> Self {
        use LayerSpec::*;
        let mut layers = Vec::new();
        for _ in 0..4 {
            layers.extend([Conv3x3 { out: 64 }, LayerNorm, Relu]);
        }
        layers.extend([AvgPool, Dense { out: 64 }, Relu, Dense { out: 3 }]);
        Self::new((size, size, 3), &layers).expect("full spec is valid")
    }

    pub fn input(&self) -> Shape {
        self.input
    }

    pub fn input_size(&self) -> usize {
        self.input.size()
    }

    pub fn layers(&self) -> &[PlannedLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Number of layers carrying parameters (conv, ln, dense).
    pub fn param_layers(&self) -> usize {
        self.param_layers
    }

    /// `(offset, len)` of each parameterized layer's block.
    pub fn param_blocks(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .filter(|l| l.param_layer.is_some())
            .map(|l| (l.offset, l.param_len()))
            .collect()
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Shape::Spatial { h, w, c } = self.input else { unreachable!() };
        write!(f, "{h}x{w}x{c}:")?;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", l.kind)?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse network spec {s:?}"));
        let (dims, layers) = s.trim().split_once(':').ok_or_else(bad)?;
        let d: Vec<usize> = dims
            .split('x')
            .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if d.len() != 3 {
            return Err(bad());
        }
        let layers: Vec<LayerSpec> = layers
            .split(',')
            .map(|l| {
                let l = l.trim();
                Ok(match l {
                    "ln" => LayerSpec::LayerNorm,
                    "relu" => LayerSpec::Relu,
                    "avgpool" => LayerSpec::AvgPool,
                    _ if l.starts_with("conv") => LayerSpec::Conv3x3 {
                        out: l[4..].parse().map_err(|_| bad())?,
                    },
                    _ if l.starts_with("dense") => LayerSpec::Dense {
                        out: l[5..].parse().map_err(|_| bad())?,
                    },
                    _ => return Err(bad()),
                })
            })
            .collect::<Result<_>>()?;
        Self::new((d[0], d[1], d[2]), &layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_parameter_count() {
        let s = NetworkSpec::desk(16);
        // 27*16+16, 2*16, 144*16+16, 2*16, 16*16+16, 16*3+3
        assert_eq!(s.param_count(), 448 + 32 + 2320 + 32 + 272 + 51);
        assert_eq!(s.param_layers(), 6);
        assert_eq!(s.to_string(), "16x16x3:conv16,ln,relu,conv16,ln,relu,avgpool,dense16,relu,dense3");
    }

    #[test]
    fn text_round_trip() {
        for s in [NetworkSpec::desk(8), NetworkSpec::full(32)] {
            let parsed: NetworkSpec = s.to_string().parse().unwrap();
            assert_eq!(parsed, s);
        }
        let tiny: NetworkSpec = "2x2x3:dense3".parse().unwrap();
        assert_eq!(tiny.param_count(), 12 * 3 + 3);
    }

    #[test]
    fn inconsistent_specs_are_rejected() {
        assert!("4x4x3:conv8,avgpool,dense4".parse::<NetworkSpec>().is_err());
        assert!("4x4x3:avgpool,conv3".parse::<NetworkSpec>().is_err());
        assert!("4x4x3:avgpool,avgpool,dense3".parse::<NetworkSpec>().is_err());
        assert!("4x4:dense3".parse::<NetworkSpec>().is_err());
        assert!("4x4x3:conv0,avgpool,dense3".parse::<NetworkSpec>().is_err());
        assert!("4x4x3:pool,dense3".parse::<NetworkSpec>().is_err());
    }
}
