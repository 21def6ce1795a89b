//! Multi-branch network blocks. Layers hold indices into a [`ParamStore`];
//! the values are passed in at call time.
//!
//! [`ParamStore`]: super::ParamStore

use crate::error::Result;
use crate::tensor::{self, ConvParams, Real, Shape, Tensor};

use super::params::{Builder, Init};

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn build(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let weight = b.push(
            format!("{name}.weight"),
            Shape::new(cout, cin, k, k),
            Init::He {
                fan_in: cin * k * k,
                gain,
            },
            true,
        );
        let bias = b.push(
            format!("{name}.bias"),
            Shape::new(1, cout, 1, 1),
            Init::Zeros,
            true,
        );
        Conv {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    fn params<T: Real>(&self, p: &[Tensor<T>]) -> Result<ConvParams<T>> {
        ConvParams::new(
            p[self.weight].clone(),
            p[self.bias].clone(),
            self.stride,
            self.padding,
        )
    }

    pub fn forward<T: Real>(&self, p: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv2d(x, &self.params(p)?)
    }

    fn down<T: Real>(&self, p: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::downsample2(x, &self.params(p)?)
    }

    fn up<T: Real>(&self, p: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::upsample2(x, &self.params(p)?)
    }
}

/// Resizes one branch to another branch's resolution and width.
#[derive(Clone, Debug)]
struct Transition {
    src: usize,
    down: bool,
    steps: Vec<Conv>,
}

#[derive(Clone, Debug)]
struct FuseTarget {
    transitions: Vec<Transition>,
    fuse: Conv,
}

/// Cross-scale feature aggregation: every branch receives every other
/// branch resized to its own resolution, concatenated after its own
/// features and fused by a 1x1 convolution.
#[derive(Clone, Debug)]
pub(crate) struct Aggregation {
    targets: Vec<FuseTarget>,
}

impl Aggregation {
    pub fn build(b: &mut Builder, name: &str, scales: &[usize], widths: &[usize]) -> Self {
        let levels: Vec<u32> = scales.iter().map(|t| t.trailing_zeros()).collect();
        let targets = (0..scales.len())
            .map(|d| {
                let transitions = (0..scales.len())
                    .filter(|&s| s != d)
                    .map(|s| {
                        let down = levels[s] < levels[d];
                        let n = levels[s].abs_diff(levels[d]) as usize;
                        let steps = (0..n)
                            .map(|i| {
                                let cin = if i == 0 { widths[s] } else { widths[d] };
                                Conv::build(
                                    b,
                                    &format!("{name}.to{d}.from{s}.{i}"),
                                    cin,
                                    widths[d],
                                    3,
                                    if down { 2 } else { 1 },
                                    1.0,
                                )
                            })
                            .collect();
                        Transition { src: s, down, steps }
                    })
                    .collect();
                let fuse = Conv::build(
                    b,
                    &format!("{name}.to{d}.fuse"),
                    widths[d] * scales.len(),
                    widths[d],
                    1,
                    1,
                    1.0,
                );
                FuseTarget { transitions, fuse }
            })
            .collect();
        Aggregation { targets }
    }

    pub fn forward<T: Real>(&self, p: &[Tensor<T>], feats: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        self.targets
            .iter()
            .enumerate()
            .map(|(d, target)| {
                let mut parts = vec![feats[d].clone()];
                for tr in &target.transitions {
                    let mut x = feats[tr.src].clone();
                    for step in &tr.steps {
                        x = if tr.down { step.down(p, &x)? } else { step.up(p, &x)? };
                    }
                    parts.push(x);
                }
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                target.fuse.forward(p, &tensor::concat_channels(&refs)?)
            })
            .collect()
    }
}

/// Hyperparameter generator: one pre-activation scalar per branch and sample.
#[derive(Clone, Debug)]
pub(crate) struct HpgNet {
    entry: Vec<Conv>,
    stages: Vec<(Vec<Conv>, Aggregation)>,
    head: Vec<Conv>,
}

pub(crate) const HPG_STAGES: usize = 3;

impl HpgNet {
    /// `in_per_scale` multiplies the `t²` channels of each branch input.
    pub fn build(
        b: &mut Builder,
        name: &str,
        scales: &[usize],
        widths: &[usize],
        in_per_scale: usize,
    ) -> Self {
        let entry = scales
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (&t, &w))| {
                Conv::build(b, &format!("{name}.entry.{i}"), in_per_scale * t * t, w, 3, 1, 1.0)
            })
            .collect();
        let stages = (0..HPG_STAGES)
            .map(|s| {
                let convs = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| Conv::build(b, &format!("{name}.stage{s}.conv.{i}"), w, w, 3, 1, 1.0))
                    .collect();
                (convs, Aggregation::build(b, &format!("{name}.stage{s}.agg"), scales, widths))
            })
            .collect();
        let head = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Conv::build(b, &format!("{name}.head.{i}"), w, 1, 1, 1, 0.1))
            .collect();
        HpgNet {
            entry,
            stages,
            head,
        }
    }

    /// Per-branch `(n, 1, 1, 1)` pre-activations.
    pub fn forward<T: Real>(&self, p: &[Tensor<T>], inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut f = self
            .entry
            .iter()
            .zip(inputs)
            .map(|(c, x)| Ok(tensor::relu(&c.forward(p, x)?)))
            .collect::<Result<Vec<_>>>()?;
        for (convs, agg) in &self.stages {
            f = convs
                .iter()
                .zip(&f)
                .map(|(c, x)| Ok(tensor::relu(&c.forward(p, x)?)))
                .collect::<Result<Vec<_>>>()?;
            f = agg.forward(p, &f)?;
        }
        self.head
            .iter()
            .zip(&f)
            .map(|(c, x)| Ok(tensor::global_avg_pool(&c.forward(p, x)?)))
            .collect()
    }
}

/// `conv-relu-conv-relu-conv` plus identity skip.
#[derive(Clone, Debug)]
struct ResBlock {
    convs: Vec<Conv>,
}

pub(crate) const RES_DEPTH: usize = 3;
pub(crate) const HPM_STAGES: usize = 2;

impl ResBlock {
    fn forward<T: Real>(&self, p: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(p, &h)?;
            if i + 1 < self.convs.len() {
                h = tensor::relu(&h);
            }
        }
        tensor::add(x, &h)
    }
}

/// Hierarchical proximal network. Each branch output is its input plus the
/// network correction, so all-zero weights give the identity map.
#[derive(Clone, Debug)]
pub(crate) struct HpmNet {
    entry: Vec<Conv>,
    stages: Vec<(Vec<ResBlock>, Aggregation)>,
    exit: Vec<Conv>,
}

impl HpmNet {
    pub fn build(b: &mut Builder, name: &str, scales: &[usize], widths: &[usize]) -> Self {
        let entry = scales
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (&t, &w))| Conv::build(b, &format!("{name}.entry.{i}"), t * t, w, 3, 1, 1.0))
            .collect();
        let stages = (0..HPM_STAGES)
            .map(|s| {
                let blocks = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| ResBlock {
                        convs: (0..RES_DEPTH)
                            .map(|j| {
                                Conv::build(b, &format!("{name}.stage{s}.res.{i}.{j}"), w, w, 3, 1, 1.0)
                            })
                            .collect(),
                    })
                    .collect();
                (blocks, Aggregation::build(b, &format!("{name}.stage{s}.agg"), scales, widths))
            })
            .collect();
        let exit = scales
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (&t, &w))| Conv::build(b, &format!("{name}.exit.{i}"), w, t * t, 3, 1, 0.0))
            .collect();
        HpmNet {
            entry,
            stages,
            exit,
        }
    }

    pub fn forward<T: Real>(&self, p: &[Tensor<T>], inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut f = self
            .entry
            .iter()
            .zip(inputs)
            .map(|(c, x)| Ok(tensor::relu(&c.forward(p, x)?)))
            .collect::<Result<Vec<_>>>()?;
        for (blocks, agg) in &self.stages {
            f = blocks
                .iter()
                .zip(&f)
                .map(|(r, x)| r.forward(p, x))
                .collect::<Result<Vec<_>>>()?;
            f = agg.forward(p, &f)?;
        }
        self.exit
            .iter()
            .zip(inputs.iter().zip(&f))
            .map(|(c, (x, h))| tensor::add(x, &c.forward(p, h)?))
            .collect()
    }
}
