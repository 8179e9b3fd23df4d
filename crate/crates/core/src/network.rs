//! Residual 3D fully convolutional segmentation network.
//!
//! Layer sequence:
//!
//! ```text
//! stem    conv k, 1 -> w          + ReLU
//! down1   conv k /2, w -> 2w      + ReLU
//! down2   conv k /2, 2w -> 4w     + ReLU
//! blockN  x + conv(ReLU(conv(ReLU(x))))   (pre-activation, 4w channels)
//! up1     conv^T (k+1) *2, 4w -> 2w + ReLU
//! up2     conv^T (k+1) *2, 2w -> w  + ReLU
//! head    conv 1x1x1, w -> N_c        (one logit channel per class)
//! ```
//!
//! The transposed convolutions use an even kernel `k + 1` with padding
//! `(k - 1) / 2`, which maps `D` to exactly `2D`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub base_width: usize,
    pub num_res_blocks: usize,
    pub kernel_size: usize,
    /// Initial value of the output-head biases; every other bias starts at zero.
    #[serde(default)]
    pub head_bias_init: f64,
}

/// Head bias used by the desk configuration: a foreground prior of about 2%,
/// roughly the per-class voxel share of the desk phantoms.
pub const DESK_HEAD_BIAS: f64 = -4.0;

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { num_classes: 11, base_width: 32, num_res_blocks: 16, kernel_size: 3, head_bias_init: 0.0 }
    }
}

impl NetworkConfig {
    /// Small network used for desk-scale experiments.
    ///
    /// Starting the heads at the foreground prior skips the long phase in
    /// which a zero-bias head slowly learns that almost every voxel is
    /// background.
    pub fn desk(num_classes: usize) -> Self {
        NetworkConfig { num_classes, base_width: 8, num_res_blocks: 2, kernel_size: 3, head_bias_init: DESK_HEAD_BIAS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.base_width == 0 || self.num_res_blocks == 0 {
            return Err(Error::Config(format!("network sizes must be positive: {self:?}")));
        }
        if !self.head_bias_init.is_finite() {
            return Err(Error::Config("head_bias_init must be finite".into()));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size must be odd and positive, got {}", self.kernel_size)));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let (w, k) = (self.base_width, self.kernel_size);
        let pad = (k - 1) / 2;
        let conv = |name: String, c_in, c_out, k, stride, pad| Layer { name, c_in, c_out, k, stride, pad, transpose: false };
        let mut layers = vec![
            conv("stem".into(), 1, w, k, 1, pad),
            conv("down1".into(), w, 2 * w, k, 2, pad),
            conv("down2".into(), 2 * w, 4 * w, k, 2, pad),
        ];
        for b in 0..self.num_res_blocks {
            layers.push(conv(format!("block{b}.conv1"), 4 * w, 4 * w, k, 1, pad));
            layers.push(conv(format!("block{b}.conv2"), 4 * w, 4 * w, k, 1, pad));
        }
        let up = |name: &str, c_in, c_out| Layer { name: name.into(), c_in, c_out, k: k + 1, stride: 2, pad, transpose: true };
        layers.push(up("up1", 4 * w, 2 * w));
        layers.push(up("up2", 2 * w, w));
        layers.push(conv("head".into(), w, self.num_classes, 1, 1, 0));
        layers
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.push((format!("{}.weight", l.name), l.weight_shape()));
            out.push((format!("{}.bias", l.name), vec![l.c_out]));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
}

impl Layer {
    fn weight_shape(&self) -> Vec<usize> {
        let k = self.k;
        if self.transpose {
            vec![self.c_in, self.c_out, k, k, k]
        } else {
            vec![self.c_out, self.c_in, k, k, k]
        }
    }

    fn fan_in(&self) -> usize {
        let taps = self.k * self.k * self.k;
        if self.transpose {
            (self.c_in * taps / (self.stride * self.stride * self.stride)).max(1)
        } else {
            self.c_in * taps
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// All parameters of the network plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: NetworkConfig,
    seed: u64,
    params: Vec<NamedParam>,
}

/// Builds a network with He-normal kernels and zero biases (the head biases
/// start at `head_bias_init`).
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut params = Vec::new();
    for l in config.layers() {
        let std = libm::sqrt(2.0 / l.fan_in() as f64);
        let shape = l.weight_shape();
        let weight = Tensor::from_fn(&shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        });
        params.push(NamedParam { name: format!("{}.weight", l.name), tensor: weight });
        let bias = if l.name == "head" { config.head_bias_init } else { 0.0 };
        params.push(NamedParam { name: format!("{}.bias", l.name), tensor: Tensor::full(&[l.c_out], bias) });
    }
    Ok(ModelParams { config: config.clone(), seed, params })
}

impl ModelParams {
    /// Reassembles parameters (e.g. from a checkpoint), checking names and
    /// shapes against `config`.
    pub fn from_parts(config: NetworkConfig, seed: u64, params: Vec<NamedParam>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(ModelParams { config, seed, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// The parameters that only class `n`'s logit channel depends on: its row
    /// of the 1x1x1 head kernel and its head bias.
    pub fn class_head(&self, n: usize) -> (Vec<f64>, f64) {
        let w = self.config.base_width;
        let kernel = self.get("head.weight").expect("head present");
        let bias = self.get("head.bias").expect("head present");
        (kernel.data()[n * w..(n + 1) * w].to_vec(), bias.data()[n])
    }

    /// Records every parameter as a leaf, in storage order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.tensor.clone(), requires_grad)).collect()
    }
}

/// One pre-activation residual block: `x + conv2(relu(conv1(relu(x))))`.
///
/// `conv1` and `conv2` are `(kernel, bias)` pairs of stride-1 convolutions.
pub fn residual_block(tape: &mut Tape, x: Var, conv1: (Var, Var), conv2: (Var, Var), padding: usize) -> Result<Var> {
    let channels = tape.value(x).shape().first().copied().unwrap_or(0);
    let k1 = tape.value(conv1.0).shape();
    let k2 = tape.value(conv2.0).shape();
    if k1.get(1) != Some(&channels) || k2.first() != Some(&channels) {
        return Err(Error::shape(
            "residual_block",
            format!("skip path has {channels} channels but the branch maps {:?} -> {:?}", k1.get(1), k2.first()),
        ));
    }
    let h = tape.relu(x)?;
    let h = tape.conv3d(h, conv1.0, conv1.1, 1, padding)?;
    let h = tape.relu(h)?;
    let h = tape.conv3d(h, conv2.0, conv2.1, 1, padding)?;
    tape.add(x, h)
}

fn check_input(shape: &[usize]) -> Result<()> {
    let dims = match *shape {
        [1, d, h, w] => [d, h, w],
        _ => return Err(Error::shape("forward", format!("input must be [1, D, H, W], got {shape:?}"))),
    };
    for (axis, n) in ["depth", "height", "width"].iter().zip(dims) {
        if n % 4 != 0 || n < 8 {
            return Err(Error::shape(
                "forward",
                format!("{axis} {n} must be a multiple of 4 and at least 8 (two /2 stages)"),
            ));
        }
    }
    Ok(())
}

/// Records the network on `tape`; `vars` come from [`ModelParams::bind`].
pub fn forward_on_tape(tape: &mut Tape, config: &NetworkConfig, vars: &[Var], input: Var) -> Result<Var> {
    check_input(tape.value(input).shape())?;
    let layers = config.layers();
    if vars.len() != 2 * layers.len() {
        return Err(Error::Config(format!("expected {} parameter vars, got {}", 2 * layers.len(), vars.len())));
    }
    let wb = |i: usize| (vars[2 * i], vars[2 * i + 1]);
    let mut li = 0;
    let mut x = input;
    for _ in 0..3 {
        let l = &layers[li];
        let (w, b) = wb(li);
        x = tape.conv3d(x, w, b, l.stride, l.pad)?;
        x = tape.relu(x)?;
        li += 1;
    }
    let pad = (config.kernel_size - 1) / 2;
    for _ in 0..config.num_res_blocks {
        x = residual_block(tape, x, wb(li), wb(li + 1), pad)?;
        li += 2;
    }
    for _ in 0..2 {
        let l = &layers[li];
        let (w, b) = wb(li);
        x = tape.conv3d_transpose(x, w, b, l.stride, l.pad)?;
        x = tape.relu(x)?;
        li += 1;
    }
    let (w, b) = wb(li);
    tape.conv3d(x, w, b, 1, 0)
}

/// Inference: logits `[N_c, D, H, W]` for an input `[1, D, H, W]`.
pub fn forward(params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    check_input(input.shape())?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let y = forward_on_tape(&mut tape, &params.config, &vars, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk2() -> NetworkConfig {
        NetworkConfig { num_classes: 2, base_width: 4, num_res_blocks: 2, kernel_size: 3, head_bias_init: 0.0 }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network(&desk2(), 9).unwrap();
        let b = build_network(&desk2(), 9).unwrap();
        assert_eq!(a, b);
        let c = build_network(&desk2(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_layer_list() {
        // stem 1->4, down 4->8, 8->16, four 16->16 block convs, up 16->8, 8->4 (4^3 taps), head 4->2.
        let conv = |cin: usize, cout: usize, taps: usize| cin * cout * taps + cout;
        let expected = conv(1, 4, 27)
            + conv(4, 8, 27)
            + conv(8, 16, 27)
            + 4 * conv(16, 16, 27)
            + conv(16, 8, 64)
            + conv(8, 4, 64)
            + conv(4, 2, 1);
        assert_eq!(expected, 42430);
        assert_eq!(build_network(&desk2(), 0).unwrap().num_parameters(), expected);
    }

    #[test]
    fn full_scale_config_builds() {
        let p = build_network(&NetworkConfig::default(), 1).unwrap();
        assert_eq!(p.config().num_classes, 11);
        assert_eq!(p.get("head.bias").unwrap().shape(), &[11]);
        assert!(p.get("block15.conv2.weight").is_some());
    }

    #[test]
    fn names_are_unique() {
        let shapes = NetworkConfig::default().parameter_shapes();
        let mut names: Vec<_> = shapes.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), shapes.len());
    }

    #[test]
    fn forward_preserves_spatial_shape() {
        let p = build_network(&desk2(), 3).unwrap();
        let x = Tensor::from_fn(&[1, 16, 16, 16], |i| libm::sin(i as f64));
        let y = forward(&p, &x).unwrap();
        assert_eq!(y.shape(), &[2, 16, 16, 16]);
        assert!(y.all_finite());
        let x = Tensor::zeros(&[1, 8, 12, 16]);
        assert_eq!(forward(&p, &x).unwrap().shape(), &[2, 8, 12, 16]);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let p = build_network(&desk2(), 3).unwrap();
        let err = forward(&p, &Tensor::zeros(&[1, 16, 18, 16])).unwrap_err();
        assert!(format!("{err}").contains("height 18 must be a multiple of 4"), "{err}");
        assert!(forward(&p, &Tensor::zeros(&[1, 4, 4, 4])).is_err());
        assert!(forward(&p, &Tensor::zeros(&[2, 8, 8, 8])).is_err());
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let mut p = build_network(&desk2(), 3).unwrap();
        p.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        let y = forward(&p, &Tensor::zeros(&[1, 8, 8, 8])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(y.data().iter().all(|&v| crate::autodiff::sigmoid(v) == 0.5));
        p.get_mut("head.bias").unwrap().data_mut().copy_from_slice(&[0.25, -1.5]);
        let y = forward(&p, &Tensor::zeros(&[1, 8, 8, 8])).unwrap();
        assert!(y.channel(0).unwrap().data().iter().all(|&v| v == 0.25));
        assert!(y.channel(1).unwrap().data().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 4, 4, 4], |i| libm::cos(i as f64) * 2.0));
        let k = tape.param(Tensor::zeros(&[3, 3, 3, 3, 3]));
        let b = tape.param(Tensor::zeros(&[3]));
        let y = residual_block(&mut tape, x, (k, b), (k, b), 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn residual_block_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 4, 4, 4]));
        let k1 = tape.param(Tensor::zeros(&[3, 3, 3, 3, 3]));
        let b1 = tape.param(Tensor::zeros(&[3]));
        let k2 = tape.param(Tensor::zeros(&[2, 3, 3, 3, 3]));
        let b2 = tape.param(Tensor::zeros(&[2]));
        assert!(residual_block(&mut tape, x, (k1, b1), (k2, b2), 1).is_err());
    }

    #[test]
    fn from_parts_checks_layout() {
        let p = build_network(&desk2(), 3).unwrap();
        let mut parts = p.params().to_vec();
        assert_eq!(ModelParams::from_parts(desk2(), 3, parts.clone()).unwrap(), p);
        parts.swap(0, 1);
        assert!(ModelParams::from_parts(desk2(), 3, parts).is_err());
    }
}
