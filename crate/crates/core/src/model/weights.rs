//! Parameter tensors and their mapping to container names.
//!
//! Names follow the GPT-2 checkpoint convention with the `transformer.` prefix
//! dropped. Projection matrices are stored `[in, out]`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, PositionalKind};
use super::container::{Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln_1_gamma: Vec<f32>,
    pub ln_1_beta: Vec<f32>,
    /// `[d_model, 3·d_model]`, query | key | value.
    pub attn_qkv: Matrix,
    pub attn_qkv_bias: Vec<f32>,
    pub attn_out: Matrix,
    pub attn_out_bias: Vec<f32>,
    pub ln_2_gamma: Vec<f32>,
    pub ln_2_beta: Vec<f32>,
    pub mlp_in: Matrix,
    pub mlp_in_bias: Vec<f32>,
    pub mlp_out: Matrix,
    pub mlp_out_bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub token_embedding: Matrix,
    /// `[max_positions, d_model]`; present only for learned absolute positions.
    pub positional_table: Option<Matrix>,
    pub layers: Vec<LayerWeights>,
    pub ln_f_gamma: Vec<f32>,
    pub ln_f_beta: Vec<f32>,
    /// `[vocab_size, d_model]`; `None` when tied to the token embedding.
    pub lm_head: Option<Matrix>,
}

enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }
}

/// Every tensor name the config requires, with its expected shape.
fn expected_tensors(config: &ModelConfig) -> Vec<(String, Shape)> {
    let (d, ff, v, n) = (config.d_model, config.d_ff, config.vocab_size, config.max_positions);
    let mut out = vec![("wte.weight".to_string(), Shape::Matrix(v, d))];
    if config.positional_kind == PositionalKind::LearnedAbsolute {
        out.push(("wpe.weight".into(), Shape::Matrix(n, d)));
    }
    for l in 0..config.n_layers {
        let p = |s: &str| format!("h.{l}.{s}");
        out.extend([
            (p("ln_1.weight"), Shape::Vector(d)),
            (p("ln_1.bias"), Shape::Vector(d)),
            (p("attn.c_attn.weight"), Shape::Matrix(d, 3 * d)),
            (p("attn.c_attn.bias"), Shape::Vector(3 * d)),
            (p("attn.c_proj.weight"), Shape::Matrix(d, d)),
            (p("attn.c_proj.bias"), Shape::Vector(d)),
            (p("ln_2.weight"), Shape::Vector(d)),
            (p("ln_2.bias"), Shape::Vector(d)),
            (p("mlp.c_fc.weight"), Shape::Matrix(d, ff)),
            (p("mlp.c_fc.bias"), Shape::Vector(ff)),
            (p("mlp.c_proj.weight"), Shape::Matrix(ff, d)),
            (p("mlp.c_proj.bias"), Shape::Vector(d)),
        ]);
    }
    out.push(("ln_f.weight".into(), Shape::Vector(d)));
    out.push(("ln_f.bias".into(), Shape::Vector(d)));
    if !config.tie_lm_head {
        out.push(("lm_head.weight".into(), Shape::Matrix(v, d)));
    }
    out
}

struct Taker<'a> {
    container: &'a mut TensorContainer,
}

impl Taker<'_> {
    fn raw(&mut self, name: &str, shape: &Shape) -> Result<Vec<f32>> {
        let load_err = |reason: String| Error::Load {
            tensor: name.to_string(),
            reason,
        };
        let t = self
            .container
            .remove(name)
            .ok_or_else(|| load_err("missing from container".into()))?;
        let want = shape.dims();
        if t.shape != want {
            return Err(load_err(format!("shape {:?}, expected {want:?}", t.shape)));
        }
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(load_err(format!("non-finite value at flat index {i}")));
        }
        Ok(t.data)
    }

    fn vector(&mut self, name: &str, n: usize) -> Result<Vec<f32>> {
        self.raw(name, &Shape::Vector(n))
    }

    fn matrix(&mut self, name: &str, r: usize, c: usize) -> Result<Matrix> {
        Matrix::from_vec(r, c, self.raw(name, &Shape::Matrix(r, c))?)
    }
}

impl Weights {
    /// Builds weights from a container, checking every required tensor's
    /// presence, shape and finiteness. Extra tensors are ignored.
    pub fn from_container(mut container: TensorContainer, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, ff, v, n) = (config.d_model, config.d_ff, config.vocab_size, config.max_positions);
        let mut take = Taker {
            container: &mut container,
        };
        let token_embedding = take.matrix("wte.weight", v, d)?;
        let positional_table = match config.positional_kind {
            PositionalKind::LearnedAbsolute => Some(take.matrix("wpe.weight", n, d)?),
            PositionalKind::Rotary => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("h.{l}.{s}");
            layers.push(LayerWeights {
                ln_1_gamma: take.vector(&p("ln_1.weight"), d)?,
                ln_1_beta: take.vector(&p("ln_1.bias"), d)?,
                attn_qkv: take.matrix(&p("attn.c_attn.weight"), d, 3 * d)?,
                attn_qkv_bias: take.vector(&p("attn.c_attn.bias"), 3 * d)?,
                attn_out: take.matrix(&p("attn.c_proj.weight"), d, d)?,
                attn_out_bias: take.vector(&p("attn.c_proj.bias"), d)?,
                ln_2_gamma: take.vector(&p("ln_2.weight"), d)?,
                ln_2_beta: take.vector(&p("ln_2.bias"), d)?,
                mlp_in: take.matrix(&p("mlp.c_fc.weight"), d, ff)?,
                mlp_in_bias: take.vector(&p("mlp.c_fc.bias"), ff)?,
                mlp_out: take.matrix(&p("mlp.c_proj.weight"), ff, d)?,
                mlp_out_bias: take.vector(&p("mlp.c_proj.bias"), d)?,
            });
        }
        let ln_f_gamma = take.vector("ln_f.weight", d)?;
        let ln_f_beta = take.vector("ln_f.bias", d)?;
        let lm_head = if config.tie_lm_head {
            None
        } else {
            Some(take.matrix("lm_head.weight", v, d)?)
        };
        Ok(Self {
            token_embedding,
            positional_table,
            layers,
            ln_f_gamma,
            ln_f_beta,
            lm_head,
        })
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let mut put = |name: String, shape: Vec<usize>, data: &[f32]| {
            c.insert(name, Tensor::new(shape, data.to_vec()).expect("consistent shapes"));
        };
        let mat = |m: &Matrix| vec![m.rows(), m.cols()];
        put(
            "wte.weight".into(),
            mat(&self.token_embedding),
            self.token_embedding.data(),
        );
        if let Some(p) = &self.positional_table {
            put("wpe.weight".into(), mat(p), p.data());
        }
        for (l, w) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("h.{l}.{s}");
            put(p("ln_1.weight"), vec![w.ln_1_gamma.len()], &w.ln_1_gamma);
            put(p("ln_1.bias"), vec![w.ln_1_beta.len()], &w.ln_1_beta);
            put(p("attn.c_attn.weight"), mat(&w.attn_qkv), w.attn_qkv.data());
            put(p("attn.c_attn.bias"), vec![w.attn_qkv_bias.len()], &w.attn_qkv_bias);
            put(p("attn.c_proj.weight"), mat(&w.attn_out), w.attn_out.data());
            put(p("attn.c_proj.bias"), vec![w.attn_out_bias.len()], &w.attn_out_bias);
            put(p("ln_2.weight"), vec![w.ln_2_gamma.len()], &w.ln_2_gamma);
            put(p("ln_2.bias"), vec![w.ln_2_beta.len()], &w.ln_2_beta);
            put(p("mlp.c_fc.weight"), mat(&w.mlp_in), w.mlp_in.data());
            put(p("mlp.c_fc.bias"), vec![w.mlp_in_bias.len()], &w.mlp_in_bias);
            put(p("mlp.c_proj.weight"), mat(&w.mlp_out), w.mlp_out.data());
            put(p("mlp.c_proj.bias"), vec![w.mlp_out_bias.len()], &w.mlp_out_bias);
        }
        put("ln_f.weight".into(), vec![self.ln_f_gamma.len()], &self.ln_f_gamma);
        put("ln_f.bias".into(), vec![self.ln_f_beta.len()], &self.ln_f_beta);
        if let Some(h) = &self.lm_head {
            put("lm_head.weight".into(), mat(h), h.data());
        }
        c
    }

    /// Random weights drawn from a seeded normal with standard deviation
    /// `std`. Layer-norm gains are centred on 1.
    pub fn random(config: &ModelConfig, seed: u64, std: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut container = TensorContainer::new();
        for (name, shape) in expected_tensors(config) {
            let dims = shape.dims();
            let n: usize = dims.iter().product();
            let is_gain = name.ends_with("ln_1.weight") || name.ends_with("ln_2.weight") || name == "ln_f.weight";
            let data = (0..n)
                .map(|_| {
                    let x = normal.sample(&mut rng);
                    if is_gain {
                        1.0 + x
                    } else {
                        x
                    }
                })
                .collect();
            container.insert(name, Tensor::new(dims, data)?);
        }
        Self::from_container(container, config)
    }
}

/// Reads a `PCWT1` container and validates it against `config`.
pub fn load_weights(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Weights> {
    Weights::from_container(TensorContainer::load(path)?, config)
}
