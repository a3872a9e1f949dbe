//! Composite state encoder `s = g(f_1(x_1), ..., f_M(x_M))` built from a
//! design vector.
//!
//! Source modules are either MHSA+FFN (`mhsa+ffn` family) or plain FFN
//! (`ffn`); the module whose family is `fusion` is an FFN over the
//! concatenated source outputs. CNN, GRU and merge-style fusion families are
//! declared by some spaces but have no kernels here.

mod attention;
pub mod gradcheck;
mod layers;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::{input_trace, output_trace, FUSED_TRACE};
use crate::space::{CompositeSpace, DesignVector, ModuleSpace};

pub use attention::Mhsa;
pub use layers::{sigmoid, Activation, Ffn, Linear};

/// Activation of the FFN that follows attention; the MHSA families have no
/// activation choice.
pub const ATTENTION_FFN_ACTIVATION: Activation = Activation::Relu;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid design vector: {0}")]
    InvalidVector(String),
    #[error("module `{module}`: family `{family}` is not supported by the encoder")]
    UnsupportedFamily { module: String, family: String },
    #[error("module `{module}`: {heads} heads do not divide dimension {dimension}")]
    HeadsDoNotDivide {
        module: String,
        heads: usize,
        dimension: usize,
    },
    #[error("module `{module}`: unknown activation `{name}`")]
    UnknownActivation { module: String, name: String },
    #[error("module `{0}`: missing input shape")]
    MissingInputShape(String),
    #[error("module `{module}`: expected {expected} inputs, got {got}")]
    ShapeMismatch {
        module: String,
        expected: usize,
        got: usize,
    },
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("upstream gradient has {got} entries, state width is {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// `rows x cols` input of one source; vectors have `rows == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub rows: usize,
    pub cols: usize,
}

impl InputShape {
    pub fn matrix(rows: usize, cols: usize) -> Self {
        InputShape { rows, cols }
    }

    pub fn vector(len: usize) -> Self {
        InputShape { rows: 1, cols: len }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum Block {
    Attention(Box<Mhsa>),
    Dense(Ffn),
}

impl Block {
    fn out_dim(&self) -> usize {
        match self {
            Block::Attention(m) => m.out_dim(),
            Block::Dense(f) => f.out_dim(),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Block::Attention(m) => m.param_count(),
            Block::Dense(f) => f.param_count(),
        }
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        match self {
            Block::Attention(m) => m.visit(f),
            Block::Dense(d) => d.visit(f),
        }
    }
}

#[derive(Debug, Clone)]
struct Source {
    name: String,
    shape: InputShape,
    block: Block,
}

/// Intermediate outputs of one forward pass, keyed by trace key
/// (`<module>.input`, `<module>.output`, `fused`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub snapshots: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CompositeEncoder {
    space_id: String,
    design: DesignVector,
    seed: u64,
    sources: Vec<Source>,
    fusion_name: String,
    fusion: Ffn,
    cached: bool,
}

fn number(module: &ModuleSpace, v: &DesignVector, choice: &str) -> Result<usize, EncoderError> {
    v.get(&module.name, choice)
        .and_then(|x| x.as_f64())
        .filter(|x| *x >= 1.0 && x.fract() == 0.0)
        .map(|x| x as usize)
        .ok_or_else(|| EncoderError::UnsupportedFamily {
            module: module.name.clone(),
            family: format!("{} (no integer `{choice}`)", module.family),
        })
}

fn activation(module: &ModuleSpace, v: &DesignVector) -> Result<Activation, EncoderError> {
    let name = v
        .get(&module.name, "activation")
        .and_then(|x| x.as_label())
        .ok_or_else(|| EncoderError::UnsupportedFamily {
            module: module.name.clone(),
            family: format!("{} (no `activation`)", module.family),
        })?;
    Activation::from_name(name).ok_or_else(|| EncoderError::UnknownActivation {
        module: module.name.clone(),
        name: name.to_string(),
    })
}

/// Rejects spaces with families that have no kernels. Cheap; no weights.
pub fn check_supported(space: &CompositeSpace) -> Result<(), EncoderError> {
    let mut fusion = 0;
    for m in space.modules() {
        match m.family.as_str() {
            "mhsa+ffn" | "ffn" => {}
            "fusion" => {
                fusion += 1;
                for c in ["activation", "dimension", "ratio", "depth"] {
                    if m.choice(c).is_none() {
                        return Err(EncoderError::UnsupportedFamily {
                            module: m.name.clone(),
                            family: format!("{} (merge-style)", m.family),
                        });
                    }
                }
            }
            other => {
                return Err(EncoderError::UnsupportedFamily {
                    module: m.name.clone(),
                    family: other.to_string(),
                })
            }
        }
    }
    if fusion != 1 {
        return Err(EncoderError::UnsupportedFamily {
            module: space.space_id().to_string(),
            family: format!("{fusion} fusion modules"),
        });
    }
    Ok(())
}

impl CompositeEncoder {
    /// Builds and initializes the encoder deterministically from `seed`.
    pub fn instantiate(
        space: &CompositeSpace,
        v: &DesignVector,
        input_shapes: &BTreeMap<String, InputShape>,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        let report = space.validate(v);
        if !report.is_valid() {
            return Err(EncoderError::InvalidVector(report.summary()));
        }
        check_supported(space)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sources = Vec::new();
        let mut fusion = None;
        for m in space.modules() {
            match m.family.as_str() {
                "fusion" => fusion = Some(m),
                family => {
                    let shape = *input_shapes
                        .get(&m.name)
                        .ok_or_else(|| EncoderError::MissingInputShape(m.name.clone()))?;
                    let dimension = number(m, v, "dimension")?;
                    let ratio = number(m, v, "ratio")?;
                    let depth = number(m, v, "depth")?;
                    let block = if family == "mhsa+ffn" {
                        let heads = number(m, v, "heads")?;
                        if dimension % heads != 0 {
                            return Err(EncoderError::HeadsDoNotDivide {
                                module: m.name.clone(),
                                heads,
                                dimension,
                            });
                        }
                        Block::Attention(Box::new(Mhsa::new(
                            shape.cols,
                            heads,
                            dimension,
                            ratio,
                            depth,
                            ATTENTION_FFN_ACTIVATION,
                            &mut rng,
                        )))
                    } else {
                        let act = activation(m, v)?;
                        Block::Dense(Ffn::new(
                            shape.len(),
                            dimension,
                            ratio,
                            depth,
                            act,
                            &mut rng,
                        ))
                    };
                    sources.push(Source {
                        name: m.name.clone(),
                        shape,
                        block,
                    });
                }
            }
        }
        let fm = fusion.expect("checked by check_supported");
        let fused_in: usize = sources.iter().map(|s| s.block.out_dim()).sum();
        let fusion_ffn = Ffn::new(
            fused_in,
            number(fm, v, "dimension")?,
            number(fm, v, "ratio")?,
            number(fm, v, "depth")?,
            activation(fm, v)?,
            &mut rng,
        );
        Ok(CompositeEncoder {
            space_id: space.space_id().to_string(),
            design: v.clone(),
            seed,
            sources,
            fusion_name: fm.name.clone(),
            fusion: fusion_ffn,
            cached: false,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.fusion.out_dim()
    }

    pub fn fusion_name(&self) -> &str {
        &self.fusion_name
    }

    /// Width of the concatenated source outputs fed to the fusion module.
    pub fn fusion_input_dim(&self) -> usize {
        self.sources.iter().map(|s| s.block.out_dim()).sum()
    }

    pub fn source_names(&self) -> impl Iterator<Item = &str> {
        self.sources.iter().map(|s| s.name.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.sources
            .iter()
            .map(|s| s.block.param_count())
            .sum::<usize>()
            + self.fusion.param_count()
    }

    /// Runs every source module and the fusion module. `inputs` maps module
    /// name to its flattened row-major input.
    pub fn forward(
        &mut self,
        inputs: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(Vec<f64>, ForwardTrace), EncoderError> {
        self.cached = false;
        let mut trace = ForwardTrace::default();
        let mut fused_in = Vec::with_capacity(self.fusion_input_dim());
        for s in &mut self.sources {
            let x = inputs
                .get(&s.name)
                .ok_or_else(|| EncoderError::MissingInputShape(s.name.clone()))?;
            if x.len() != s.shape.len() {
                return Err(EncoderError::ShapeMismatch {
                    module: s.name.clone(),
                    expected: s.shape.len(),
                    got: x.len(),
                });
            }
            let out = match &mut s.block {
                Block::Attention(m) => m.forward(x, s.shape.rows),
                Block::Dense(f) => f.forward(x, 1),
            };
            trace.snapshots.insert(input_trace(&s.name), x.clone());
            trace.snapshots.insert(output_trace(&s.name), out.clone());
            fused_in.extend_from_slice(&out);
        }
        let state = self.fusion.forward(&fused_in, 1);
        trace
            .snapshots
            .insert(FUSED_TRACE.to_string(), state.clone());
        self.cached = true;
        Ok((state, trace))
    }

    /// Accumulates into the gradient buffers the gradient of
    /// `<upstream, state>` with respect to every parameter.
    pub fn backward(&mut self, upstream: &[f64]) -> Result<(), EncoderError> {
        if !self.cached {
            return Err(EncoderError::NoForwardCache);
        }
        if upstream.len() != self.state_dim() {
            return Err(EncoderError::GradientShape {
                expected: self.state_dim(),
                got: upstream.len(),
            });
        }
        let d_in = self.fusion.backward(upstream);
        let mut offset = 0;
        for s in &mut self.sources {
            let w = s.block.out_dim();
            let slice = &d_in[offset..offset + w];
            match &mut s.block {
                Block::Attention(m) => m.backward(slice),
                Block::Dense(f) => {
                    f.backward(slice);
                }
            }
            offset += w;
        }
        Ok(())
    }

    /// Visits `(parameters, gradients)` slices in canonical order: sources in
    /// declared order, then fusion.
    pub fn visit(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for s in &mut self.sources {
            s.block.visit(f);
        }
        self.fusion.visit(f);
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, g| g.iter_mut().for_each(|x| *x = 0.0));
    }

    pub fn parameters(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |p, _| out.extend_from_slice(p));
        out
    }

    pub fn gradients(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, g| out.extend_from_slice(g));
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<(), EncoderError> {
        let n = self.param_count();
        if values.len() != n {
            return Err(EncoderError::Checkpoint(format!(
                "expected {n} parameters, got {}",
                values.len()
            )));
        }
        let mut pos = 0;
        self.visit(&mut |p, _| {
            p.copy_from_slice(&values[pos..pos + p.len()]);
            pos += p.len();
        });
        self.cached = false;
        Ok(())
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        Checkpoint {
            space_id: self.space_id.clone(),
            design_vector: self.design.clone(),
            seed: self.seed,
            parameters: self.parameters(),
        }
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), EncoderError> {
        if ckpt.space_id != self.space_id || ckpt.design_vector != self.design {
            return Err(EncoderError::Checkpoint(
                "checkpoint was written for a different architecture".into(),
            ));
        }
        self.set_parameters(&ckpt.parameters)
    }
}

/// Parameters in canonical order with a header naming the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub space_id: String,
    pub design_vector: DesignVector,
    pub seed: u64,
    pub parameters: Vec<f64>,
}
