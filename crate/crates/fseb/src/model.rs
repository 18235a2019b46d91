//! Multilayer perceptron with an explicit feature/head split.
//!
//! The network is `f(x) = h(x) · W_head` where `h` is a stack of dense
//! layers with pointwise nonlinearities and the head is a bias-free linear
//! map from the last hidden layer. Keeping the head linear in the features
//! is what lets the function-space machinery treat `h` as a feature map.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{real, rng_from_seed, std_normal, to_f64, uniform, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pointwise nonlinearity applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Weight initialization family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// N(0, 2/n_in) — suited to rectifier activations.
    He,
    /// N(0, 2/(n_in + n_out)) — suited to saturating activations.
    Glorot,
}

/// Architecture description. The feature dimension is the last hidden
/// width; the head maps features to logits without a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Defaults per activation: He for relu, Glorot for tanh.
    #[serde(default)]
    pub init_scheme: Option<InitScheme>,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument(
                "input_dim and output_dim must be positive".into(),
            ));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one hidden layer is required; the head reads features from it".into(),
            ));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the feature map feeding the head.
    pub fn feature_dim(&self) -> usize {
        *self.hidden_widths.last().expect("validated config has hidden layers")
    }

    /// The scheme actually used: the explicit choice if set, otherwise
    /// He for relu and Glorot for tanh.
    pub fn resolved_init(&self) -> InitScheme {
        self.init_scheme.unwrap_or(match self.activation {
            Activation::Tanh => InitScheme::Glorot,
            Activation::Relu => InitScheme::He,
        })
    }
}

/// One dense layer. Inputs are row vectors: `y = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F: Real> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Where a frozen feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// A fresh random initialization, never trained.
    RandomInit,
    /// Loaded from a checkpoint produced by an earlier run.
    PretrainedCheckpoint,
    /// Copied from the training trajectory of the current run.
    TrainSnapshot,
}

/// Full parameter set of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    pub layers: Vec<DenseLayer<F>>,
    /// Bias-free linear head, `feature_dim × output_dim`.
    pub head: Tensor<F>,
    pub activation: Activation,
}

/// Frozen copy of parameters used as a feature map for kernel
/// construction. The copy is deep: later training steps cannot mutate it.
#[derive(Debug, Clone)]
pub struct FeatureSnapshot<F: Real> {
    params: ModelParams<F>,
    provenance: Provenance,
}

impl<F: Real> FeatureSnapshot<F> {
    pub fn new(params: ModelParams<F>, provenance: Provenance) -> Self {
        Self { params, provenance }
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn feature_dim(&self) -> usize {
        self.params.feature_dim()
    }

    /// Feature activations of the frozen map, one row per input row.
    pub fn features(&self, inputs: &Tensor<F>) -> Result<Tensor<F>> {
        self.params.features(inputs)
    }
}

fn activation_apply<F: Real>(a: Activation, t: &Tensor<F>) -> Tensor<F> {
    match a {
        Activation::Tanh => t.map(F::tanh),
        Activation::Relu => t.map(|v| if v > F::zero() { v } else { F::zero() }),
    }
}

/// Rowwise softmax with max-shifting; safe for large logits.
pub fn softmax_rows<F: Real>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    if logits.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "softmax_rows",
            details: format!("expected rank 2, got {:?}", logits.shape()),
        });
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = logits.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

impl<F: Real> ModelParams<F> {
    /// Draws a fresh parameter set. The draw order is fixed (each layer's
    /// weight then bias, then the head) so a seed pins every coordinate.
    /// Hidden biases are uniform in ±1/√n_in; exactly-zero biases would
    /// park relu units on their kink whenever an input row dies.
    pub fn init(config: &MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let scheme = config.resolved_init();
        let mut rng = rng_from_seed(seed);
        let draw_matrix = |n_in: usize, n_out: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let sd = match scheme {
                InitScheme::He => (2.0 / n_in as f64).sqrt(),
                InitScheme::Glorot => (2.0 / (n_in + n_out) as f64).sqrt(),
            };
            let sd: F = real(sd);
            let data: Vec<F> = (0..n_in * n_out).map(|_| std_normal::<F, _>(rng) * sd).collect();
            Tensor::from_vec(vec![n_in, n_out], data)
        };
        let draw_bias = |n_in: usize, width: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = 1.0 / (n_in as f64).sqrt();
            let data: Vec<F> = (0..width).map(|_| uniform(rng, -bound, bound)).collect();
            Tensor::from_vec(vec![width], data)
        };

        let mut layers = Vec::with_capacity(config.hidden_widths.len());
        let mut n_in = config.input_dim;
        for &width in &config.hidden_widths {
            let weight = draw_matrix(n_in, width, &mut rng)?;
            let bias = draw_bias(n_in, width, &mut rng)?;
            layers.push(DenseLayer { weight, bias });
            n_in = width;
        }
        let head = draw_matrix(config.feature_dim(), config.output_dim, &mut rng)?;
        Ok(Self { layers, head, activation: config.activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.head.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.head.shape()[1]
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
            + self.head.len()
    }

    /// Canonical (name, tensor) listing: layers in order, weight before
    /// bias, head last. Flattening, checkpoints, and perturbation draws
    /// all follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{}.weight", i), &layer.weight));
            out.push((format!("layer{}.bias", i), &layer.bias));
        }
        out.push(("head.weight".to_string(), &self.head));
        out
    }

    /// Mutable variant of [`ModelParams::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{}.weight", i), &mut layer.weight));
            out.push((format!("layer{}.bias", i), &mut layer.bias));
        }
        out.push(("head.weight".to_string(), &mut self.head));
        out
    }

    /// Flattens all parameters into one vector in canonical order.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a parameter set with this set's shapes from a flat vector.
    pub fn unflatten(&self, flat: &[F]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                details: format!(
                    "expected {} parameters, got {}",
                    self.param_count(),
                    flat.len()
                ),
            });
        }
        let mut params = self.clone();
        let mut offset = 0;
        for (_, t) in params.named_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    /// Hidden-stack output, one feature row per input row.
    pub fn features(&self, inputs: &Tensor<F>) -> Result<Tensor<F>> {
        let mut h = inputs.clone();
        for layer in &self.layers {
            h = activation_apply(self.activation, &h.matmul(&layer.weight)?.add(&layer.bias)?);
        }
        Ok(h)
    }

    /// Logits `h(x)·W_head`, one row per input row.
    pub fn logits(&self, inputs: &Tensor<F>) -> Result<Tensor<F>> {
        self.features(inputs)?.matmul(&self.head)
    }

    /// Softmax class probabilities, one row per input row.
    pub fn predict_proba(&self, inputs: &Tensor<F>) -> Result<Tensor<F>> {
        softmax_rows(&self.logits(inputs)?)
    }

    /// Deep-copies the parameters into a frozen feature map.
    pub fn snapshot(&self, provenance: Provenance) -> FeatureSnapshot<F> {
        FeatureSnapshot::new(self.clone(), provenance)
    }

    /// Registers every parameter as a named leaf on a tape.
    pub fn register(&self, tape: &Tape<F>) -> Result<LiveModel<F>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(LiveLayer {
                weight: tape.leaf(format!("layer{}.weight", i), layer.weight.clone())?,
                bias: tape.leaf(format!("layer{}.bias", i), layer.bias.clone())?,
            });
        }
        let head = tape.leaf("head.weight", self.head.clone())?;
        Ok(LiveModel { layers, head, activation: self.activation })
    }

    /// Registers leaves shifted by `sigma · eps`. With `sigma == 0` this
    /// records exactly the same graph as [`ModelParams::register`], so the
    /// zero-noise objective reproduces the unperturbed one bit for bit.
    pub fn register_perturbed(
        &self,
        tape: &Tape<F>,
        sigma: F,
        eps: &ModelParams<F>,
    ) -> Result<LiveModel<F>> {
        if sigma == F::zero() {
            return self.register(tape);
        }
        let shift = |theta: &Var<F>, noise: &Tensor<F>| -> Result<Var<F>> {
            let scaled = tape.constant(noise.scale(sigma))?;
            theta.add(&scaled)
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, (layer, noise)) in self.layers.iter().zip(eps.layers.iter()).enumerate() {
            let weight = tape.leaf(format!("layer{}.weight", i), layer.weight.clone())?;
            let bias = tape.leaf(format!("layer{}.bias", i), layer.bias.clone())?;
            layers.push(LiveLayer {
                weight: shift(&weight, &noise.weight)?,
                bias: shift(&bias, &noise.bias)?,
            });
        }
        let head = tape.leaf("head.weight", self.head.clone())?;
        let head = shift(&head, &eps.head)?;
        Ok(LiveModel { layers, head, activation: self.activation })
    }

    /// Materializes `θ + sigma·eps` as a plain parameter set. With
    /// `sigma == 0` this is an exact copy, mirroring the tape-side
    /// short-circuit in [`ModelParams::register_perturbed`].
    pub fn perturbed(&self, sigma: F, eps: &ModelParams<F>) -> Self {
        if sigma == F::zero() {
            return self.clone();
        }
        let mut out = self.clone();
        for (layer, noise) in out.layers.iter_mut().zip(eps.layers.iter()) {
            layer
                .weight
                .axpy(sigma, &noise.weight)
                .expect("perturbation weight shapes match by construction");
            layer
                .bias
                .axpy(sigma, &noise.bias)
                .expect("perturbation bias shapes match by construction");
        }
        out.head.axpy(sigma, &eps.head).expect("perturbation head shapes match by construction");
        out
    }

    /// Draws a standard-normal direction with this parameter set's shapes,
    /// in canonical order, for use with [`ModelParams::register_perturbed`].
    pub fn sample_perturbation(&self, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut draw_like = |t: &Tensor<F>| {
            let data: Vec<F> = (0..t.len()).map(|_| std_normal::<F, _>(&mut rng)).collect();
            Tensor::from_vec(t.shape().to_vec(), data).expect("shape comes from an existing tensor")
        };
        let layers = self
            .layers
            .iter()
            .map(|l| DenseLayer { weight: draw_like(&l.weight), bias: draw_like(&l.bias) })
            .collect();
        let head = draw_like(&self.head);
        Self { layers, head, activation: self.activation }
    }

    /// Central-difference gradient of `f` with respect to the flattened
    /// parameters. An independent check on the tape gradients.
    pub fn fd_gradient(
        &self,
        step: F,
        mut f: impl FnMut(&ModelParams<F>) -> Result<F>,
    ) -> Result<Vec<F>> {
        let x0 = self.flatten();
        crate::tape::fd_gradient(|x| f(&self.unflatten(x)?), &x0, step)
    }

    /// Writes the parameters to a binary checkpoint (f64 payload).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[match self.activation {
            Activation::Tanh => 0u8,
            Activation::Relu => 1u8,
        }])?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        let named = self.named_tensors();
        w.write_all(&(named.len() as u32).to_le_bytes())?;
        for (name, t) in named {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&to_f64(v).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ModelParams::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let bad = |details: String| Error::DataFormat { path: display.clone(), details };
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic; not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", version)));
        }
        let mut act = [0u8; 1];
        r.read_exact(&mut act)?;
        let activation = match act[0] {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            other => return Err(bad(format!("unknown activation tag {}", other))),
        };
        let n_layers = read_u32(&mut r)? as usize;
        let n_tensors = read_u32(&mut r)? as usize;
        if n_tensors != 2 * n_layers + 1 {
            return Err(bad(format!(
                "{} layers should carry {} tensors, found {}",
                n_layers,
                2 * n_layers + 1,
                n_tensors
            )));
        }

        let read_tensor = |r: &mut BufReader<File>| -> Result<(String, Tensor<F>)> {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| bad(format!("tensor name is not utf-8: {}", e)))?;
            let rank = read_u32(r)? as usize;
            if rank > 2 {
                return Err(bad(format!("tensor {} has unsupported rank {}", name, rank)));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(real::<F>(read_f64(r)?));
            }
            Ok((name, Tensor::from_vec(shape, data)?))
        };

        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (wname, weight) = read_tensor(&mut r)?;
            let (bname, bias) = read_tensor(&mut r)?;
            if wname != format!("layer{}.weight", i) || bname != format!("layer{}.bias", i) {
                return Err(bad(format!(
                    "layer {} tensors out of order: found {} and {}",
                    i, wname, bname
                )));
            }
            layers.push(DenseLayer { weight, bias });
        }
        let (hname, head) = read_tensor(&mut r)?;
        if hname != "head.weight" {
            return Err(bad(format!("expected head.weight last, found {}", hname)));
        }
        Ok(Self { layers, head, activation })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSEB";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// One dense layer registered on a tape. The vars are the *effective*
/// parameters: for perturbed registration they already include the noise.
#[derive(Debug, Clone)]
pub struct LiveLayer<F: Real> {
    pub weight: Var<F>,
    pub bias: Var<F>,
}

/// Network registered on a tape, ready to build differentiable losses.
#[derive(Debug, Clone)]
pub struct LiveModel<F: Real> {
    pub layers: Vec<LiveLayer<F>>,
    pub head: Var<F>,
    pub activation: Activation,
}

impl<F: Real> LiveModel<F> {
    /// Hidden-stack output for a batch registered as a constant.
    pub fn features_var(&self, inputs: &Var<F>) -> Result<Var<F>> {
        let mut h = inputs.clone();
        for layer in &self.layers {
            let pre = h.matmul(&layer.weight)?.add(&layer.bias)?;
            h = match self.activation {
                Activation::Tanh => pre.tanh()?,
                Activation::Relu => pre.relu()?,
            };
        }
        Ok(h)
    }

    /// Logits for a batch registered as a constant.
    pub fn logits_var(&self, inputs: &Var<F>) -> Result<Var<F>> {
        self.features_var(inputs)?.matmul(&self.head)
    }

    /// Σ θ² over every effective parameter tensor (weights, biases, head).
    pub fn squared_norm_var(&self) -> Result<Var<F>> {
        let mut total: Option<Var<F>> = None;
        for layer in &self.layers {
            for var in [&layer.weight, &layer.bias] {
                let term = var.square()?.sum()?;
                total = Some(match total {
                    Some(t) => t.add(&term)?,
                    None => term,
                });
            }
        }
        let head_term = self.head.square()?.sum()?;
        Ok(match total {
            Some(t) => t.add(&head_term)?,
            None => head_term,
        })
    }

    /// Summed cross-entropy of a labeled batch: −Σ_b log softmax(f(x_b))[y_b].
    pub fn cross_entropy_sum_var(&self, inputs: &Var<F>, labels: &[usize]) -> Result<Var<F>> {
        let logits = self.logits_var(inputs)?;
        cross_entropy_sum(&logits, labels)
    }
}

/// Summed cross-entropy of recorded logits against integer labels:
/// `−Σ_b log softmax(logits_b)[y_b]`.
pub fn cross_entropy_sum<F: Real>(logits: &Var<F>, labels: &[usize]) -> Result<Var<F>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_sum",
            details: format!("logits {:?} vs {} labels", shape, labels.len()),
        });
    }
    let k = shape[1];
    let mut onehot = Tensor::zeros(vec![labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                y, k
            )));
        }
        *onehot.at_mut(i, y) = F::one();
    }
    // The one-hot mask keeps exactly the picked log-probabilities.
    let log_probs = logits.log_softmax()?;
    let mask = log_probs.tape().constant(onehot)?;
    log_probs.mul(&mask)?.sum()?.scale(-F::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    fn small_config() -> MlpConfig {
        MlpConfig {
            input_dim: 3,
            hidden_widths: vec![5, 4],
            output_dim: 2,
            activation: Activation::Tanh,
            init_scheme: None,
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_shapes() {
        let mut c = small_config();
        c.hidden_widths.clear();
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.input_dim = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.hidden_widths = vec![4, 0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_reproducible_and_seed_sensitive() {
        let c = small_config();
        let a = ModelParams::<f64>::init(&c, 11).unwrap();
        let b = ModelParams::<f64>::init(&c, 11).unwrap();
        let d = ModelParams::<f64>::init(&c, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
        assert_eq!(a.param_count(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2);
        assert_eq!(a.feature_dim(), 4);
    }

    #[test]
    fn tape_forward_equals_plain_forward_exactly() {
        let c = small_config();
        let params = ModelParams::<f64>::init(&c, 5).unwrap();
        let x = Tensor::from_vec(vec![4, 3], (0..12).map(|i| 0.3 * i as f64 - 1.0).collect())
            .unwrap();
        let plain = params.logits(&x).unwrap();

        let tape = Tape::new();
        let live = params.register(&tape).unwrap();
        let xv = tape.constant(x).unwrap();
        let taped = live.logits_var(&xv).unwrap().value();
        assert_eq!(plain.data(), taped.data());
    }

    #[test]
    fn flatten_roundtrip_is_exact() {
        let params = ModelParams::<f64>::init(&small_config(), 9).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.param_count());
        let back = params.unflatten(&flat).unwrap();
        assert_eq!(params, back);
        assert!(params.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::<f64>::init(&small_config(), 21).unwrap();
        params.save_checkpoint(&path).unwrap();
        let loaded = ModelParams::<f64>::load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn checkpoint_rejects_foreign_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            ModelParams::<f64>::load_checkpoint(&path),
            Err(Error::DataFormat { .. })
        ));
    }

    #[test]
    fn zero_sigma_perturbation_reproduces_the_plain_graph() {
        let params = ModelParams::<f64>::init(&small_config(), 3).unwrap();
        let eps = params.sample_perturbation(99);
        let x = Tensor::from_vec(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();

        let t1 = Tape::new();
        let plain = params.register(&t1).unwrap();
        let y1 = plain.logits_var(&t1.constant(x.clone()).unwrap()).unwrap().value();

        let t2 = Tape::new();
        let zero = params.register_perturbed(&t2, 0.0, &eps).unwrap();
        let y2 = zero.logits_var(&t2.constant(x.clone()).unwrap()).unwrap().value();
        assert_eq!(y1.data(), y2.data());

        let t3 = Tape::new();
        let shifted = params.register_perturbed(&t3, 0.5, &eps).unwrap();
        let y3 = shifted.logits_var(&t3.constant(x).unwrap()).unwrap().value();
        assert_ne!(y1.data(), y3.data());
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_huge_logits() {
        let logits =
            Tensor::from_vec(vec![2, 3], vec![1000.0, 999.0, 998.0, -3.0, 0.0, 3.0]).unwrap();
        let p = softmax_rows(&logits).unwrap();
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
        assert!(p.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cross_entropy_matches_a_hand_computation() {
        // Single linear layer, identity-ish: compute by hand on 2 points.
        let c = MlpConfig {
            input_dim: 2,
            hidden_widths: vec![2],
            output_dim: 2,
            activation: Activation::Tanh,
            init_scheme: None,
        };
        let params = ModelParams::<f64>::init(&c, 7).unwrap();
        let x = Tensor::from_vec(vec![2, 2], vec![0.5, -1.0, 1.5, 0.25]).unwrap();
        let labels = [0usize, 1usize];

        let tape = Tape::new();
        let live = params.register(&tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let ce = live.cross_entropy_sum_var(&xv, &labels).unwrap();

        let logits = params.logits(&x).unwrap();
        let mut expected = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expected -= row[y] - lse;
        }
        assert_relative_eq!(ce.item().unwrap(), expected, max_relative = 1e-12);
    }
}
