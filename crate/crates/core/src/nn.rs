//! Network definition: convolution blocks, the in-plane attention module,
//! Project&Excite channel attention, and their assembly into a 2.5D U-Net.
//!
//! Parameters live in a name-keyed map outside any tape. A forward pass
//! registers them as tape leaves on demand, so one parameter set can serve
//! both training (gradients per name) and prediction (no gradients).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::SpatialAxis;
use crate::scalar::Scalar;
use crate::tape::{Activation, BnUpdate, GradTape, Mode, TensorId};
use crate::tensor::Tensor;

/// Kernel selection: `Aniso2p5d` uses 1x3x3 convolutions everywhere except
/// the bottom block (3x3x3); `Iso3d` widens every 1x3x3 kernel to 3x3x3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    Aniso2p5d,
    Iso3d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Channel width per resolution level, shallow to deep. Four levels,
    /// three downsamplings.
    pub base_channels: Vec<usize>,
    /// Channel reduction `d` inside the Project&Excite excitation.
    pub pe_reduction: usize,
    pub kernel_mode: KernelMode,
    pub in_channels: usize,
    pub out_classes: usize,
    /// Training patch extent as depth x height x width.
    pub patch_shape: [usize; 3],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: vec![16, 32, 64, 128],
            pe_reduction: 2,
            kernel_mode: KernelMode::Aniso2p5d,
            in_channels: 1,
            out_classes: 2,
            patch_shape: [16, 64, 64],
        }
    }
}

impl NetworkConfig {
    /// Half-width preset that trains in minutes on one CPU core.
    pub fn desk_scale() -> Self {
        NetworkConfig { base_channels: vec![8, 16, 32, 64], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels.len() != 4 {
            return Err(Error::invalid(
                "network_config",
                format!("base_channels needs 4 levels, got {}", self.base_channels.len()),
            ));
        }
        for (level, &c) in self.base_channels.iter().enumerate() {
            if c == 0 || c % 2 != 0 || c % self.pe_reduction != 0 {
                return Err(Error::invalid(
                    "network_config",
                    format!(
                        "level {} width {} must be positive, even, and divisible by pe_reduction {}",
                        level, c, self.pe_reduction
                    ),
                ));
            }
        }
        if self.pe_reduction == 0 {
            return Err(Error::invalid("network_config", "pe_reduction must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("network_config", "in_channels must be positive"));
        }
        if self.out_classes != 2 {
            return Err(Error::invalid(
                "network_config",
                format!("out_classes must be 2 (background, tumor), got {}", self.out_classes),
            ));
        }
        let [d, h, w] = self.patch_shape;
        if d == 0 || h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(
                "network_config",
                format!(
                    "patch shape {}x{}x{} needs positive dims with H and W divisible by 8",
                    d, h, w
                ),
            ));
        }
        Ok(())
    }

    fn plane_kernel(&self) -> [usize; 3] {
        match self.kernel_mode {
            KernelMode::Aniso2p5d => [1, 3, 3],
            KernelMode::Iso3d => [3, 3, 3],
        }
    }
}

/// How a parameter tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

/// Name, shape, and initialization of one parameter tensor. The full list is
/// a pure function of the configuration, in fixed architectural order.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
    pub trainable: bool,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: [usize; 3]) {
    let kvol = k[0] * k[1] * k[2];
    out.push(ParamSpec {
        name: format!("{}.weight", prefix),
        shape: vec![cout, cin, k[0], k[1], k[2]],
        init: ParamInit::HeNormal { fan_in: cin * kvol },
        trainable: true,
    });
    out.push(ParamSpec {
        name: format!("{}.bias", prefix),
        shape: vec![cout],
        init: ParamInit::Zeros,
        trainable: true,
    });
}

fn bn_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    for (field, init, trainable) in [
        ("gamma", ParamInit::Ones, true),
        ("beta", ParamInit::Zeros, true),
        ("running_mean", ParamInit::Zeros, false),
        ("running_var", ParamInit::Ones, false),
    ] {
        out.push(ParamSpec {
            name: format!("{}.{}", prefix, field),
            shape: vec![c],
            init,
            trainable,
        });
    }
}

/// Every parameter of the network in deterministic order: the nine
/// convolution blocks, the eight PE blocks, the five attention modules, the
/// three upsampling layers, then the classification head.
pub fn param_specs(config: &NetworkConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let c = &config.base_channels;
    let k = config.plane_kernel();
    let kb = [3, 3, 3];
    let mut specs = Vec::new();

    let blocks: [(&str, usize, usize, [usize; 3]); 9] = [
        ("enc1", config.in_channels, c[0], k),
        ("enc2", c[0], c[1], k),
        ("enc3", c[1], c[2], k),
        ("enc4", c[2], c[3], k),
        ("bottom", c[3], c[3], kb),
        ("dec1", 2 * c[3], c[3], k),
        ("dec2", 2 * c[2], c[2], k),
        ("dec3", 2 * c[1], c[1], k),
        ("dec4", 2 * c[0], c[0], k),
    ];
    for (name, cin, cout, kk) in blocks {
        conv_specs(&mut specs, &format!("{}.conv1", name), cin, cout, kk);
        bn_specs(&mut specs, &format!("{}.bn1", name), cout);
        conv_specs(&mut specs, &format!("{}.conv2", name), cout, cout, kk);
        bn_specs(&mut specs, &format!("{}.bn2", name), cout);
    }

    let pe: [(&str, usize); 8] = [
        ("pe_enc2", c[0]),
        ("pe_enc3", c[1]),
        ("pe_enc4", c[2]),
        ("pe_bottom", c[3]),
        ("pe_dec1", 2 * c[3]),
        ("pe_dec2", 2 * c[2]),
        ("pe_dec3", 2 * c[1]),
        ("pe_dec4", 2 * c[0]),
    ];
    for (name, ch) in pe {
        let reduced = ch / config.pe_reduction;
        conv_specs(&mut specs, &format!("{}.f1", name), ch, reduced, [1, 1, 1]);
        conv_specs(&mut specs, &format!("{}.f2", name), reduced, ch, [1, 1, 1]);
    }

    let am: [(&str, usize); 5] = [
        ("am_bottom", c[3]),
        ("am_dec1", 2 * c[3]),
        ("am_dec2", 2 * c[2]),
        ("am_dec3", 2 * c[1]),
        ("am_dec4", 2 * c[0]),
    ];
    for (name, ch) in am {
        conv_specs(&mut specs, &format!("{}.conv1", name), ch, ch / 2, k);
        conv_specs(&mut specs, &format!("{}.conv2", name), ch / 2, 1, k);
    }

    let ups: [(&str, usize, usize); 3] = [
        ("up_dec2", c[3], c[2]),
        ("up_dec3", c[2], c[1]),
        ("up_dec4", c[1], c[0]),
    ];
    for (name, cin, cout) in ups {
        specs.push(ParamSpec {
            name: format!("{}.weight", name),
            shape: vec![cin, cout, 1, 2, 2],
            init: ParamInit::HeNormal { fan_in: cin * 4 },
            trainable: true,
        });
        specs.push(ParamSpec {
            name: format!("{}.bias", name),
            shape: vec![cout],
            init: ParamInit::Zeros,
            trainable: true,
        });
    }

    conv_specs(&mut specs, "head", c[0], config.out_classes, [1, 1, 1]);
    Ok(specs)
}

/// Name-keyed parameter store. Running statistics are held here as
/// non-trainable tensors and refreshed explicitly between steps.
#[derive(Debug, Clone, Default)]
pub struct NetworkParams<S: Scalar = f32> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> NetworkParams<S> {
    pub fn new() -> Self {
        NetworkParams { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {}", name)))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.map
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> NetworkParams<T> {
        let map = self.map.iter().map(|(k, v)| (k.clone(), v.cast::<T>())).collect();
        NetworkParams { map }
    }

    /// Stores refreshed batch-norm running statistics produced by a
    /// train-mode forward pass.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BnUpdate<S>)]) -> Result<()> {
        for (prefix, upd) in updates {
            self.get_mut(&format!("{}.running_mean", prefix))?
                .data_mut()
                .copy_from_slice(&upd.mean);
            self.get_mut(&format!("{}.running_var", prefix))?
                .data_mut()
                .copy_from_slice(&upd.var);
        }
        Ok(())
    }
}

/// He-normal weights, zero biases, unit BN scales; one fixed draw order, so
/// a seed fully determines every tensor.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    let specs = param_specs(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::new();
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let mut t = match spec.init {
            ParamInit::HeNormal { fan_in } => {
                let dist = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::invalid("init_params", e.to_string()))?;
                let data: Vec<f32> = (0..numel).map(|_| dist.sample(&mut rng) as f32).collect();
                Tensor::from_vec(&spec.shape, data)?
            }
            ParamInit::Zeros => Tensor::zeros(&spec.shape),
            ParamInit::Ones => Tensor::full(&spec.shape, 1.0),
        };
        t.requires_grad = spec.trainable;
        params.insert(spec.name, t);
    }
    Ok(params)
}

/// Output handles of one U-Net forward pass.
pub struct UnetOutput<S: Scalar> {
    /// Per-voxel class probabilities, shape `[B, 2, D, H, W]`.
    pub probs: TensorId,
    /// Tape leaf of every parameter the pass touched, for gradient lookup.
    pub param_ids: BTreeMap<String, TensorId>,
    /// Running-statistic refreshes from train-mode batch norms.
    pub bn_updates: Vec<(String, BnUpdate<S>)>,
}

/// Records network blocks onto a tape against a fixed parameter store.
pub struct ForwardPass<'a, S: Scalar = f32> {
    tape: &'a mut GradTape<S>,
    params: &'a NetworkParams<S>,
    mode: Mode,
    ids: BTreeMap<String, TensorId>,
    bn_updates: Vec<(String, BnUpdate<S>)>,
}

impl<'a, S: Scalar> ForwardPass<'a, S> {
    pub fn new(tape: &'a mut GradTape<S>, params: &'a NetworkParams<S>, mode: Mode) -> Self {
        ForwardPass { tape, params, mode, ids: BTreeMap::new(), bn_updates: Vec::new() }
    }

    /// Tape leaf for a named parameter, registered once per pass.
    pub fn param(&mut self, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let id = self.tape.leaf(self.params.get(name)?.clone());
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn finish(self) -> (BTreeMap<String, TensorId>, Vec<(String, BnUpdate<S>)>) {
        (self.ids, self.bn_updates)
    }

    fn conv_with(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let w = self.param(&format!("{}.weight", prefix))?;
        let b = self.param(&format!("{}.bias", prefix))?;
        let ws = self.tape.value(w).dims5()?;
        for kd in &ws[2..] {
            if kd % 2 == 0 {
                return Err(Error::invalid(
                    "conv_block",
                    format!("{}.weight kernel {:?} must be odd for same padding", prefix, &ws[2..]),
                ));
            }
        }
        let padding = [(ws[2] - 1) / 2, (ws[3] - 1) / 2, (ws[4] - 1) / 2];
        self.tape.conv(x, w, b, [1, 1, 1], padding)
    }

    fn bn(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let gamma = self.param(&format!("{}.gamma", prefix))?;
        let beta = self.param(&format!("{}.beta", prefix))?;
        let rm = self.params.get(&format!("{}.running_mean", prefix))?;
        let rv = self.params.get(&format!("{}.running_var", prefix))?;
        let (y, upd) = self.tape.batch_norm(x, gamma, beta, rm, rv, self.mode)?;
        if let Some(u) = upd {
            self.bn_updates.push((prefix.to_string(), u));
        }
        Ok(y)
    }

    /// Two rounds of conv, batch norm, leaky ReLU. Kernel shape comes from
    /// the stored weights; spatial extent is preserved by same padding.
    pub fn conv_block(&mut self, prefix: &str, x: TensorId) -> Result<TensorId> {
        let y = self.conv_with(x, &format!("{}.conv1", prefix))?;
        let y = self.bn(y, &format!("{}.bn1", prefix))?;
        let y = self.tape.activation(y, Activation::LeakyRelu)?;
        let y = self.conv_with(y, &format!("{}.conv2", prefix))?;
        let y = self.bn(y, &format!("{}.bn2", prefix))?;
        self.tape.activation(y, Activation::LeakyRelu)
    }

    /// Spatial attention: conv to C/2 + ReLU, conv to a single channel +
    /// sigmoid, then a gated residual `x + x * amap`. Returns `(out, amap)`;
    /// the map holds one coefficient in (0, 1) per voxel.
    pub fn attention_module(&mut self, prefix: &str, x: TensorId) -> Result<(TensorId, TensorId)> {
        let xs = self.tape.value(x).dims5()?;
        if xs[1] % 2 != 0 {
            return Err(Error::shape(
                "attention_module",
                format!("channel count {} must be even to halve", xs[1]),
            ));
        }
        let h = self.conv_with(x, &format!("{}.conv1", prefix))?;
        let hs = self.tape.value(h).dims5()?;
        if hs[1] != xs[1] / 2 {
            return Err(Error::shape(
                "attention_module",
                format!("first conv must map {} channels to {}, produced {}", xs[1], xs[1] / 2, hs[1]),
            ));
        }
        let h = self.tape.activation(h, Activation::Relu)?;
        let a = self.conv_with(h, &format!("{}.conv2", prefix))?;
        if self.tape.value(a).dims5()?[1] != 1 {
            return Err(Error::shape("attention_module", "second conv must produce one channel"));
        }
        let amap = self.tape.activation(a, Activation::Sigmoid)?;
        let wide = self.tape.broadcast_to(amap, &xs)?;
        let gated = self.tape.mul(x, wide)?;
        let out = self.tape.add(x, gated)?;
        Ok((out, amap))
    }

    /// Project&Excite: mean projections along each spatial axis are
    /// broadcast back and summed, squeezed through a two-layer 1x1x1
    /// excitation, and applied multiplicatively to the input.
    pub fn pe_block(&mut self, prefix: &str, x: TensorId) -> Result<TensorId> {
        let xs = self.tape.value(x).dims5()?;
        let f1_shape = self.params.get(&format!("{}.f1.weight", prefix))?.shape().to_vec();
        if f1_shape.len() != 5 || f1_shape[1] != xs[1] {
            return Err(Error::shape(
                "pe_block",
                format!("excitation weight shape {:?} does not accept {} channels", f1_shape, xs[1]),
            ));
        }
        if f1_shape[0] == 0 || xs[1] % f1_shape[0] != 0 {
            return Err(Error::shape(
                "pe_block",
                format!("channel count {} not divisible by reduction width {}", xs[1], f1_shape[0]),
            ));
        }
        let zd = self.tape.pool_mean_axes(x, SpatialAxis::Depth)?;
        let zh = self.tape.pool_mean_axes(x, SpatialAxis::Height)?;
        let zw = self.tape.pool_mean_axes(x, SpatialAxis::Width)?;
        let bd = self.tape.broadcast_to(zd, &xs)?;
        let bh = self.tape.broadcast_to(zh, &xs)?;
        let bw = self.tape.broadcast_to(zw, &xs)?;
        let z = self.tape.add(bd, bh)?;
        let z = self.tape.add(z, bw)?;
        let f1 = self.conv_with(z, &format!("{}.f1", prefix))?;
        let f1 = self.tape.activation(f1, Activation::Relu)?;
        let f2 = self.conv_with(f1, &format!("{}.f2", prefix))?;
        let excite = self.tape.activation(f2, Activation::Sigmoid)?;
        self.tape.mul(x, excite)
    }

    fn upsample(&mut self, prefix: &str, x: TensorId) -> Result<TensorId> {
        let w = self.param(&format!("{}.weight", prefix))?;
        let b = self.param(&format!("{}.bias", prefix))?;
        self.tape.upsample_transposed_inplane(x, w, b)
    }

    fn decoder_stage(&mut self, index: usize, stream: TensorId, skip: TensorId) -> Result<TensorId> {
        let cat = self.tape.concat_channels(&[stream, skip])?;
        let (attended, _amap) = self.attention_module(&format!("am_dec{}", index), cat)?;
        let excited = self.pe_block(&format!("pe_dec{}", index), attended)?;
        self.conv_block(&format!("dec{}", index), excited)
    }

    fn unet(&mut self, x: TensorId, config: &NetworkConfig) -> Result<TensorId> {
        let xs = self.tape.value(x).dims5()?;
        if xs[1] != config.in_channels {
            return Err(Error::shape(
                "unet_forward",
                format!("input has {} channels, config expects {}", xs[1], config.in_channels),
            ));
        }
        if [xs[2], xs[3], xs[4]] != config.patch_shape {
            return Err(Error::shape(
                "unet_forward",
                format!(
                    "input volume {}x{}x{} does not match patch shape {}x{}x{}",
                    xs[2], xs[3], xs[4], config.patch_shape[0], config.patch_shape[1], config.patch_shape[2]
                ),
            ));
        }

        let e1 = self.conv_block("enc1", x)?;
        let p2 = self.tape.max_pool_inplane(e1)?;
        let q2 = self.pe_block("pe_enc2", p2)?;
        let e2 = self.conv_block("enc2", q2)?;
        let p3 = self.tape.max_pool_inplane(e2)?;
        let q3 = self.pe_block("pe_enc3", p3)?;
        let e3 = self.conv_block("enc3", q3)?;
        let p4 = self.tape.max_pool_inplane(e3)?;
        let q4 = self.pe_block("pe_enc4", p4)?;
        let e4 = self.conv_block("enc4", q4)?;

        let (ab, _amap) = self.attention_module("am_bottom", e4)?;
        let qb = self.pe_block("pe_bottom", ab)?;
        let bottom = self.conv_block("bottom", qb)?;

        let d1 = self.decoder_stage(1, bottom, e4)?;
        let u2 = self.upsample("up_dec2", d1)?;
        let d2 = self.decoder_stage(2, u2, e3)?;
        let u3 = self.upsample("up_dec3", d2)?;
        let d3 = self.decoder_stage(3, u3, e2)?;
        let u4 = self.upsample("up_dec4", d3)?;
        let d4 = self.decoder_stage(4, u4, e1)?;

        let logits = self.conv_with(d4, "head")?;
        self.tape.softmax_channels(logits)
    }
}

/// Full U-Net forward pass: four encoder blocks with in-plane max pooling,
/// a 3x3x3 bottom block, four decoder blocks with transposed-conv
/// upsampling and skip concatenation, each bottom/decoder block entered
/// through attention then PE; a 1x1x1 head with channel softmax closes it.
pub fn unet_forward<S: Scalar>(
    tape: &mut GradTape<S>,
    x: TensorId,
    params: &NetworkParams<S>,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<UnetOutput<S>> {
    config.validate()?;
    let mut fp = ForwardPass::new(tape, params, mode);
    let probs = fp.unet(x, config)?;
    let (param_ids, bn_updates) = fp.finish();
    Ok(UnetOutput { probs, param_ids, bn_updates })
}
