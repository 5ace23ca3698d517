//! Lens-finder models.
//!
//! A tower runs `[bands,S,S]` through the convolutional backbone to a
//! `[D,H',W']` feature map, reads it as a sequence of `H'W'` tokens of width
//! `D`, adds the positional table, applies the encoder stack, flattens and
//! passes the result through the dense ELU head. One tower (or the
//! concatenation of two) feeds a single sigmoid neuron.

mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ConvSpec, ModelConfig, POOL_SIZE};

use crate::error::{dim_err, Error, Result};
use crate::par::Parallelism;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::transformer::{encoder_stack_forward, EncoderLayer, PositionalEncoding};

#[derive(Clone, Debug)]
struct ConvLayer {
    spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Tower {
    convs: Vec<ConvLayer>,
    encoders: Vec<EncoderLayer>,
    head: Vec<(ParamId, ParamId)>,
}

/// A built detector: configuration, layer layout and parameter values.
#[derive(Clone, Debug)]
pub struct DetectorModel<F: Scalar = f32> {
    config: ModelConfig,
    seed: u64,
    params: ParamStore<F>,
    towers: Vec<Tower>,
    out_weight: ParamId,
    out_bias: ParamId,
    positional: Option<PositionalEncoding>,
}

/// Builds a model with Xavier-uniform weights and zero biases drawn from a
/// ChaCha stream seeded by `seed`.
pub fn build<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<DetectorModel<F>> {
    DetectorModel::build(config, seed)
}

/// Builds the parallel two-tower variant of `config`.
pub fn build_two_tower<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<DetectorModel<F>> {
    if config.towers != 2 {
        return Err(Error::Config(format!("two-tower build needs towers = 2, got {}", config.towers)));
    }
    DetectorModel::build(config, seed)
}

/// Hard labels: 1 when `p >= threshold`, else 0.
pub fn classify<F: Scalar>(probabilities: &[F], threshold: f64) -> Vec<u8> {
    probabilities.iter().map(|p| u8::from(p.as_f64() >= threshold)).collect()
}

impl<F: Scalar> DetectorModel<F> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, h, w) = config.backbone_output()?;
        let mut towers = Vec::with_capacity(config.towers);
        for t in 0..config.towers {
            let mut convs = Vec::new();
            let mut c_in = config.input_bands;
            for (i, &spec) in config.backbone.iter().enumerate() {
                let k = spec.kernel;
                let weight = params.add_xavier(
                    format!("tower{t}.conv{i}.weight"),
                    &[spec.out_channels, c_in, k, k],
                    c_in * k * k,
                    spec.out_channels * k * k,
                    &mut rng,
                );
                let bias = params.add_zeros(format!("tower{t}.conv{i}.bias"), &[spec.out_channels]);
                convs.push(ConvLayer { spec, weight, bias });
                c_in = spec.out_channels;
            }
            let encoders = (0..config.num_encoders)
                .map(|e| {
                    EncoderLayer::new(
                        &mut params,
                        &format!("tower{t}.encoder{e}"),
                        config.attention,
                        config.encoder_hidden(),
                        &mut rng,
                    )
                })
                .collect();
            let mut width = d * h * w;
            let mut head = Vec::new();
            for (i, &next) in config.ffn_head.iter().enumerate() {
                let wt = params.add_xavier(format!("tower{t}.head{i}.weight"), &[width, next], width, next, &mut rng);
                let b = params.add_zeros(format!("tower{t}.head{i}.bias"), &[next]);
                head.push((wt, b));
                width = next;
            }
            towers.push(Tower { convs, encoders, head });
        }
        let feature = config.ffn_head.last().copied().unwrap_or(d * h * w) * config.towers;
        let out_weight = params.add_xavier("out.weight", &[feature, 1], feature, 1, &mut rng);
        let out_bias = params.add_zeros("out.bias", &[1]);
        let positional = if config.num_encoders > 0 {
            Some(PositionalEncoding::with_base(d, h * w, config.pe_base)?)
        } else {
            None
        };
        Ok(Self { config: config.clone(), seed, params, towers, out_weight, out_bias, positional })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn tower_features<'t>(&self, tower: &Tower, image: &Var<'t, F>, p: &Bound<'t, F>) -> Result<Var<'t, F>> {
        let mut x = *image;
        for conv in &tower.convs {
            x = x
                .conv2d(&p.var(conv.weight), conv.spec.stride, conv.spec.padding)?
                .bias_add(&p.var(conv.bias), 0)?
                .elu();
            if conv.spec.pool {
                x = x.max_pool(POOL_SIZE)?;
            }
        }
        let s = x.shape();
        let (d, tokens) = (s[0], s[1] * s[2]);
        if let Some(pe) = &self.positional {
            let seq = x.reshape(&[d, tokens])?.transpose()?;
            let seq = pe.add_to(&seq)?;
            x = encoder_stack_forward(&seq, &tower.encoders, p)?;
        }
        let mut h = x.reshape(&[d * tokens])?;
        for &(w, b) in &tower.head {
            h = h.dense(&p.var(w), &p.var(b))?.elu();
        }
        Ok(h)
    }

    /// Lens probability for one `[bands,S,S]` image, as a one-element tensor.
    pub fn forward_one<'t>(&self, image: &Var<'t, F>, p: &Bound<'t, F>) -> Result<Var<'t, F>> {
        let s = image.shape();
        let want = [self.config.input_bands, self.config.input_size, self.config.input_size];
        if s != want {
            return dim_err(format!("image {s:?} does not match model input {want:?}"));
        }
        let features = self
            .towers
            .iter()
            .map(|t| self.tower_features(t, image, p))
            .collect::<Result<Vec<_>>>()?;
        let joined = if features.len() == 1 { features[0] } else { Var::concat(&features, 0)? };
        Ok(joined.dense(&p.var(self.out_weight), &p.var(self.out_bias))?.sigmoid())
    }

    /// Probability for one image given as a plain tensor.
    pub fn predict_one(&self, image: &Tensor<F>) -> Result<F> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(image.clone());
        Ok(self.forward_one(&x, &p)?.value().item())
    }

    /// Probabilities for a `[B,bands,S,S]` batch.
    pub fn forward(&self, batch: &Tensor<F>, par: Parallelism) -> Result<Tensor<F>> {
        let s = batch.shape();
        let want = [self.config.input_bands, self.config.input_size, self.config.input_size];
        if s.len() != 4 || s[1..] != want {
            return dim_err(format!("batch {s:?} does not match model input [B, {want:?}]"));
        }
        let per = want.iter().product::<usize>();
        let images: Vec<Tensor<F>> = (0..s[0])
            .map(|i| Tensor::new(want.to_vec(), batch.data()[i * per..(i + 1) * per].to_vec()))
            .collect::<Result<_>>()?;
        let probs = self.predict(&images, par)?;
        Tensor::new(vec![s[0]], probs)
    }

    /// Probabilities for a list of images, in order.
    pub fn predict(&self, images: &[Tensor<F>], par: Parallelism) -> Result<Vec<F>> {
        par.map_slice(images, |img| self.predict_one(img)).into_iter().collect()
    }

    /// Binary cross-entropy of one image and its gradient for every parameter,
    /// in parameter-store order.
    pub fn loss_and_grads(&self, image: &Tensor<F>, label: F) -> Result<(F, Vec<Tensor<F>>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(image.clone());
        let prob = self.forward_one(&x, &p)?;
        let loss = prob.binary_cross_entropy(&Tensor::full(&[1], label))?;
        let value = loss.value().item();
        let mut grads = tape.backward(loss)?;
        let out = p
            .vars()
            .iter()
            .map(|v| grads.take(v).expect("every bound parameter receives a gradient"))
            .collect();
        Ok((value, out))
    }

    pub fn to_checkpoint(&self, epoch: u64) -> Checkpoint {
        Checkpoint { config: self.config.clone(), seed: self.seed, epoch, params: self.params.cast() }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::build(&ckpt.config, ckpt.seed)?;
        model.params.load_from(&ckpt.params.cast())?;
        Ok(model)
    }

    /// Copy with parameters converted to another precision.
    pub fn cast<G: Scalar>(&self) -> DetectorModel<G> {
        DetectorModel {
            config: self.config.clone(),
            seed: self.seed,
            params: self.params.cast(),
            towers: self.towers.clone(),
            out_weight: self.out_weight,
            out_bias: self.out_bias,
            positional: self.positional.clone(),
        }
    }
}
