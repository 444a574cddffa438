use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, PositionalMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std is positive");
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    /// `d_model × 3·d_model`, columns are `[q | k | v]`, heads contiguous.
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    /// `(2·max_seq − 1) × d_head` distance table, shared by the heads of
    /// this layer. Present only in relative-bias mode.
    pub rel: Option<Tensor>,
}

/// Bookkeeping stored with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Stream the model was trained on (`integral`, `semantic`, `syntactic`).
    #[serde(default)]
    pub stream: Option<String>,
    /// Context size for models trained on context-limited sequences.
    #[serde(default)]
    pub context_k: Option<usize>,
    #[serde(default)]
    pub train_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub meta: ModelMeta,
    pub tok_emb: Tensor,
    pub pos_emb: Option<Tensor>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    /// Untied output projection, `d_model × vocab`.
    pub w_out: Tensor,
}

impl Parameters {
    /// Seeded initialisation: N(0, init_std) weights, residual projections
    /// scaled by `1/√(2·n_layers)`, zero biases, unit LayerNorm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model();
        let f = config.d_ff();
        let std = config.init_std;
        let proj_std = std / ((2 * config.n_layers) as f64).sqrt();
        let tok_emb = Tensor::normal(&[config.vocab_size, d], std, &mut rng);
        let pos_emb = (config.positional_mode == PositionalMode::Absolute)
            .then(|| Tensor::normal(&[config.max_seq, d], std, &mut rng));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                w_qkv: Tensor::normal(&[d, 3 * d], std, &mut rng),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_o: Tensor::normal(&[d, d], proj_std, &mut rng),
                b_o: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w_fc: Tensor::normal(&[d, f], std, &mut rng),
                b_fc: Tensor::zeros(&[f]),
                w_proj: Tensor::normal(&[f, d], proj_std, &mut rng),
                b_proj: Tensor::zeros(&[d]),
                rel: (config.positional_mode == PositionalMode::RelativeBias)
                    .then(|| Tensor::normal(&[2 * config.max_seq - 1, config.d_head], std, &mut rng)),
            })
            .collect();
        Ok(Parameters {
            config: config.clone(),
            meta: ModelMeta::default(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Tensor::filled(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            w_out: Tensor::normal(&[d, config.vocab_size], std, &mut rng),
        })
    }

    /// Same structure, every value zero (gradient accumulators, Adam moments).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.1.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// All tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        if let Some(p) = &self.pos_emb {
            out.push(("pos_emb".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let named = [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w_qkv", &l.w_qkv),
                ("b_qkv", &l.b_qkv),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w_fc", &l.w_fc),
                ("b_fc", &l.b_fc),
                ("w_proj", &l.w_proj),
                ("b_proj", &l.b_proj),
            ];
            out.extend(named.into_iter().map(|(n, t)| (format!("h{i}.{n}"), t)));
            if let Some(r) = &l.rel {
                out.push((format!("h{i}.rel"), r));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &mut self.tok_emb)];
        if let Some(p) = &mut self.pos_emb {
            out.push(("pos_emb".into(), p));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let named = [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("w_qkv", &mut l.w_qkv),
                ("b_qkv", &mut l.b_qkv),
                ("w_o", &mut l.w_o),
                ("b_o", &mut l.b_o),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w_fc", &mut l.w_fc),
                ("b_fc", &mut l.b_fc),
                ("w_proj", &mut l.w_proj),
                ("b_proj", &mut l.b_proj),
            ];
            out.extend(named.into_iter().map(|(n, t)| (format!("h{i}.{n}"), t)));
            if let Some(r) = &mut l.rel {
                out.push((format!("h{i}.rel"), r));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("w_out".into(), &mut self.w_out));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Parameters) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_tensors(
        config: ModelConfig,
        meta: ModelMeta,
        mut named: std::collections::HashMap<String, Tensor>,
    ) -> Result<Self> {
        let mut p = Parameters::init(&ModelConfig {
            init_std: 1.0,
            ..config.clone()
        })?;
        p.config = config;
        p.meta = meta;
        for (name, slot) in p.tensors_mut() {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {name}")))?;
            if t.shape != slot.shape {
                return Err(Error::shape(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    t.shape, slot.shape
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::invalid(format!("checkpoint has unexpected tensor {extra}")));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = ModelConfig::toy(11, PositionalMode::RelativeBias);
        let a = Parameters::init(&cfg).unwrap();
        let b = Parameters::init(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.pos_emb.is_none());
        assert_eq!(a.layers[0].rel.as_ref().unwrap().shape, [127, 8]);
        let c = Parameters::init(&ModelConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.tok_emb, c.tok_emb);
    }

    #[test]
    fn absolute_mode_has_position_table() {
        let cfg = ModelConfig::toy(5, PositionalMode::Absolute);
        let p = Parameters::init(&cfg).unwrap();
        assert_eq!(p.pos_emb.as_ref().unwrap().shape, [64, 32]);
        assert!(p.layers.iter().all(|l| l.rel.is_none()));
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 1 + 1 + 2 * 12 + 3);
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }
}
