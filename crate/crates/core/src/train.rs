//! Dice-loss training: loss construction on the tape, Adam with coupled L2
//! weight decay, the step-decay learning-rate schedule, and the
//! patch-sampling training loop.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{unet_forward, NetworkConfig, NetworkParams};
use crate::preprocess::{
    compute_region, normalize, resample_mask, resample_volume, sample_patch, truncate_hu,
    LabelMask, RegionBox, Scale, Volume,
};
use crate::scalar::Scalar;
use crate::tape::{GradTape, Mode, TensorId};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Spacing every case is resampled to before sampling or inference.
pub const TARGET_SPACING: [f64; 3] = [3.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub seed: u64,
    pub scale: Scale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_decay_factor: 0.9,
            lr_decay_every: 10_000,
            weight_decay: 1e-5,
            batch_size: 16,
            total_iterations: 2_000,
            seed: 0,
            scale: Scale::Middle,
        }
    }
}

impl TrainConfig {
    /// Preset sized for minutes-long CPU runs.
    pub fn desk_scale() -> Self {
        TrainConfig { batch_size: 4, total_iterations: 2_000, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("lr0", self.lr0),
            ("lr_decay_factor", self.lr_decay_factor),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in positives {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid("train_config", format!("{} must be finite and nonnegative", name)));
            }
        }
        if self.lr0 <= 0.0 || self.lr_decay_factor <= 0.0 {
            return Err(Error::invalid("train_config", "lr0 and lr_decay_factor must be positive"));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train_config", "lr_decay_every and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr0 * self.lr_decay_factor.powi((iteration / self.lr_decay_every) as i32)
    }
}

/// Soft Dice loss over the batch foreground channel,
/// 1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps).
pub fn dice_loss<S: Scalar>(tape: &mut GradTape<S>, probs: TensorId, target: TensorId) -> Result<TensorId> {
    let ps = tape.value(probs).dims5()?;
    let ts = tape.value(target).dims5()?;
    if ps[1] != 2 {
        return Err(Error::shape("dice_loss", format!("probs need 2 channels, got {}", ps[1])));
    }
    if ts != [ps[0], 1, ps[2], ps[3], ps[4]] {
        return Err(Error::shape(
            "dice_loss",
            format!("target shape {:?} does not match probs {:?}", ts, ps),
        ));
    }
    let p = tape.slice_channel(probs, 1)?;
    let inter = tape.mul(p, target)?;
    let s_inter = tape.sum_all(inter)?;
    let p2 = tape.mul(p, p)?;
    let s_p2 = tape.sum_all(p2)?;
    let g2 = tape.mul(target, target)?;
    let s_g2 = tape.sum_all(g2)?;
    let eps = S::from_f64(DICE_EPS);
    let num = tape.mul_scalar(s_inter, S::from_f64(2.0))?;
    let num = tape.add_scalar(num, eps)?;
    let den = tape.add(s_p2, s_g2)?;
    let den = tape.add_scalar(den, eps)?;
    let frac = tape.div(num, den)?;
    let neg = tape.mul_scalar(frac, S::from_f64(-1.0))?;
    tape.add_scalar(neg, S::ONE)
}

/// First/second moment buffers and the shared step counter, keyed like the
/// parameter map. Moments are held in f64 so update arithmetic is identical
/// across runs regardless of gradient magnitude.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params.tensors() {
            if t.requires_grad {
                m.insert(name.clone(), vec![0.0; t.numel()]);
                v.insert(name.clone(), vec![0.0; t.numel()]);
            }
        }
        AdamState { m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every trainable parameter. Weight
/// decay enters as an L2 term added to the gradient. The whole step is
/// rejected before any mutation if a gradient is non-finite or missing.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, t) in params.tensors() {
        if !t.requires_grad {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid("adam_step", format!("no gradient for parameter {}", name)))?;
        if g.len() != t.numel() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient length {} vs parameter {} ({})", g.len(), t.numel(), name),
            ));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("adam_step", format!("gradient of parameter {}", name)));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let names: Vec<String> = state.m.keys().cloned().collect();
    for name in names {
        let theta = params.get_mut(&name)?;
        if !theta.requires_grad {
            continue;
        }
        let g = &grads[&name];
        let m = state.m.get_mut(&name).unwrap();
        let v = state.v.get_mut(&name).unwrap();
        let data = theta.data_mut();
        for i in 0..data.len() {
            let grad = g[i] as f64 + weight_decay * data[i] as f64;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad * grad;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = (data[i] as f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
    }
    Ok(())
}

/// Gradients of every trainable parameter the forward pass touched.
pub fn collect_grads(
    tape: &GradTape<f32>,
    params: &NetworkParams,
    param_ids: &BTreeMap<String, TensorId>,
) -> Result<BTreeMap<String, Vec<f32>>> {
    let mut out = BTreeMap::new();
    for (name, &id) in param_ids {
        if !params.get(name)?.requires_grad {
            continue;
        }
        let g = tape
            .grad(id)
            .ok_or_else(|| Error::invalid("collect_grads", format!("no gradient recorded for {}", name)))?;
        out.insert(name.clone(), g.to_vec());
    }
    Ok(out)
}

/// One case after preprocessing: normalized resampled image, resampled
/// mask, and the sampling region box at the training scale.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub image: Volume,
    pub mask: LabelMask,
    pub region: RegionBox,
}

/// Truncate, normalize, resample: the fixed inference-time recipe.
pub fn preprocess_volume(v: &Volume) -> Result<Volume> {
    resample_volume(&normalize(&truncate_hu(v))?, TARGET_SPACING)
}

/// Prepares a raw HU case for training: the image takes the inference
/// recipe, the mask resamples nearest-neighbor, and the region box comes
/// from the truncated HU values on the resampled grid.
pub fn prepare_case(v: &Volume, m: &LabelMask, scale: Scale) -> Result<PreparedCase> {
    if v.dims != m.dims {
        return Err(Error::shape(
            "prepare_case",
            format!("volume dims {:?} vs mask dims {:?}", v.dims, m.dims),
        ));
    }
    let hu_grid = resample_volume(&truncate_hu(v), TARGET_SPACING)?;
    let image = preprocess_volume(v)?;
    let mask = resample_mask(m, TARGET_SPACING)?;
    let region = compute_region(&hu_grid, scale)?;
    Ok(PreparedCase { image, mask, region })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub params: NetworkParams,
    pub loss_log: Vec<LossRecord>,
}

/// Renders the loss log in its line format `iter<TAB>lr<TAB>loss`.
pub fn loss_log_lines(log: &[LossRecord]) -> String {
    let mut s = String::new();
    for r in log {
        s.push_str(&format!("{}\t{}\t{}\n", r.iteration, r.lr, r.loss));
    }
    s
}

fn batch_tensors(
    cases: &[PreparedCase],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [pd, ph, pw] = net.patch_shape;
    let voxels = pd * ph * pw;
    let b = cfg.batch_size;
    let mut image = vec![0.0f32; b * voxels];
    let mut label = vec![0.0f32; b * voxels];
    for i in 0..b {
        let case = &cases[rng.random_range(0..cases.len())];
        let s = sample_patch(&case.image, &case.mask, &case.region, net.patch_shape, rng)?;
        image[i * voxels..(i + 1) * voxels].copy_from_slice(&s.image);
        for (dst, &l) in label[i * voxels..(i + 1) * voxels].iter_mut().zip(&s.label) {
            *dst = l as f32;
        }
    }
    Ok((
        Tensor::from_vec(&[b, 1, pd, ph, pw], image)?,
        Tensor::from_vec(&[b, 1, pd, ph, pw], label)?,
    ))
}

/// Runs the sample/forward/loss/backward/step loop over prepared cases.
/// Deterministic for a fixed seed; batch norm running statistics refresh
/// after every step; a non-finite loss aborts with its iteration index.
pub fn train(
    cases: &[PreparedCase],
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    net.validate()?;
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::invalid("train", "no training cases"));
    }
    let mut params = crate::nn::init_params(net, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_log = Vec::with_capacity(cfg.total_iterations);

    for iteration in 0..cfg.total_iterations {
        let (image, label) = batch_tensors(cases, net, cfg, &mut rng)?;
        let mut tape: GradTape<f32> = GradTape::new();
        let x = tape.leaf(image);
        let g = tape.leaf(label);
        let out = unet_forward(&mut tape, x, &params, net, Mode::Train)?;
        let loss_id = dice_loss(&mut tape, out.probs, g)?;
        let loss = tape.value(loss_id).item()?.as_f64();
        if !loss.is_finite() {
            return Err(Error::non_finite("train", format!("loss at iteration {}", iteration)));
        }
        tape.backward(loss_id)?;
        let grads = collect_grads(&tape, &params, &out.param_ids)?;
        let lr = cfg.lr_at(iteration);
        adam_step(&mut params, &grads, &mut state, lr, cfg.weight_decay)?;
        params.apply_bn_updates(&out.bn_updates)?;
        loss_log.push(LossRecord { iteration, lr, loss });
    }
    Ok(TrainOutcome { params, loss_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use crate::nn::init_params;
    use crate::preprocess::idx3;
    use rand_distr::{Distribution, StandardNormal};

    fn probs_pair(b: usize, spatial: [usize; 3], fg: &[f32]) -> (Tensor<f32>, Vec<usize>) {
        let [d, h, w] = spatial;
        let voxels = d * h * w;
        assert_eq!(fg.len(), b * voxels);
        let mut data = vec![0.0f32; b * 2 * voxels];
        for i in 0..b {
            for s in 0..voxels {
                data[(i * 2) * voxels + s] = 1.0 - fg[i * voxels + s];
                data[(i * 2 + 1) * voxels + s] = fg[i * voxels + s];
            }
        }
        (
            Tensor::from_vec(&[b, 2, d, h, w], data).unwrap(),
            vec![b, 1, d, h, w],
        )
    }

    fn eval_dice(fg: &[f32], gt: &[f32], spatial: [usize; 3]) -> f64 {
        let (probs, tshape) = probs_pair(1, spatial, fg);
        let mut tape: GradTape<f32> = GradTape::new();
        let p = tape.leaf(probs);
        let g = tape.leaf(Tensor::from_vec(&tshape, gt.to_vec()).unwrap());
        let id = dice_loss(&mut tape, p, g).unwrap();
        tape.value(id).item().unwrap() as f64
    }

    #[test]
    fn dice_loss_hand_values() {
        let spatial = [1usize, 2, 4];
        let gt: Vec<f32> = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        // Perfect hard prediction.
        assert!(eval_dice(&gt, &gt, spatial) < 1e-4);
        // Uniform 0.5 prediction against a half-full target: 1 - 2/3.
        let half = vec![0.5f32; 8];
        let loss = eval_dice(&half, &gt, spatial);
        assert!((loss - (1.0 - 2.0 / 3.0)).abs() < 1e-3, "loss {}", loss);
        // Both empty: epsilon guard keeps it near zero.
        let zero = vec![0.0f32; 8];
        assert!(eval_dice(&zero, &zero, spatial) < 1e-4);
    }

    #[test]
    fn dice_loss_is_voxel_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spatial = [2usize, 2, 3];
        let n = 12;
        let fg: Vec<f32> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let gt: Vec<f32> = (0..n).map(|_| (rng.random_range(0.0..1.0) < 0.5) as u8 as f32).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let fg_p: Vec<f32> = perm.iter().map(|&i| fg[i]).collect();
        let gt_p: Vec<f32> = perm.iter().map(|&i| gt[i]).collect();
        let a = eval_dice(&fg, &gt, spatial);
        let b = eval_dice(&fg_p, &gt_p, spatial);
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn dice_loss_rejects_shape_mismatch() {
        let (probs, _) = probs_pair(1, [1, 2, 2], &[0.5; 4]);
        let mut tape: GradTape<f32> = GradTape::new();
        let p = tape.leaf(probs);
        let g = tape.leaf(Tensor::zeros(&[1, 1, 1, 2, 3]));
        assert!(dice_loss(&mut tape, p, g).is_err());
    }

    #[test]
    fn dice_gradient_through_softmax_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2 * 2 * 2 * 3 * 3;
        let logits: Vec<f32> = (0..n).map(|_| {
            let v: f32 = StandardNormal.sample(&mut rng);
            v
        }).collect();
        let x = Tensor::from_vec(&[2, 2, 2, 3, 3], logits).unwrap();
        let gt: Vec<f64> = (0..2 * 2 * 3 * 3)
            .map(|_| (rng.random_range(0.0..1.0) < 0.4) as u8 as f64)
            .collect();
        let err = grad_check(
            move |t, x| {
                let probs = t.softmax_channels(x)?;
                let g = t.leaf(Tensor::from_vec(
                    &[2, 1, 2, 3, 3],
                    gt.clone(),
                )?);
                dice_loss(t, probs, g)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {}", err);
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(9_999), 1e-4);
        assert!((cfg.lr_at(10_000) - 9e-5).abs() < 1e-19);
        assert!((cfg.lr_at(25_000) - 8.1e-5).abs() < 1e-19);
        for i in 1..100 {
            assert!(cfg.lr_at(i * 500) <= cfg.lr_at((i - 1) * 500));
        }
    }

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            base_channels: vec![2, 2, 2, 2],
            patch_shape: [2, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn adam_fixed_point_and_first_step_direction() {
        let net = tiny_net();
        let mut params = init_params(&net, 1).unwrap();
        let reference = params.clone();
        let mut state = AdamState::new(&params);
        let zero_grads: BTreeMap<String, Vec<f32>> = params
            .tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        adam_step(&mut params, &zero_grads, &mut state, 1e-3, 0.0).unwrap();
        for (name, t) in params.tensors() {
            assert_eq!(t.data(), reference.get(name).unwrap().data(), "{} moved", name);
        }

        // Nonzero gradient: first step is approximately -lr * sign(g).
        let mut grads = zero_grads.clone();
        let gname = "enc1.conv1.weight".to_string();
        let glen = grads[&gname].len();
        grads.insert(gname.clone(), vec![0.37; glen]);
        let before = params.get(&gname).unwrap().data().to_vec();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-3, 0.0).unwrap();
        for (b, a) in before.iter().zip(params.get(&gname).unwrap().data()) {
            let delta = (a - b) as f64;
            assert!((delta + 1e-3).abs() < 1e-6, "step {} not -lr", delta);
        }
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn adam_rejects_nonfinite_gradient_without_mutation() {
        let net = tiny_net();
        let mut params = init_params(&net, 2).unwrap();
        let reference = params.clone();
        let mut state = AdamState::new(&params);
        let mut grads: BTreeMap<String, Vec<f32>> = params
            .tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        grads.get_mut("head.weight").unwrap()[0] = f32::NAN;
        let err = adam_step(&mut params, &grads, &mut state, 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains("head.weight"));
        assert_eq!(state.step(), 0);
        for (name, t) in params.tensors() {
            assert_eq!(t.data(), reference.get(name).unwrap().data(), "{} mutated", name);
        }
    }

    fn synthetic_cases() -> Vec<PreparedCase> {
        // Raw HU blob with a bright tumor; prepared at identity spacing.
        let dims = [8usize, 24, 24];
        let mut img = vec![-200.0f32; dims[0] * dims[1] * dims[2]];
        let mut msk = vec![0u8; img.len()];
        for z in 0..8 {
            for y in 2..22 {
                for x in 2..22 {
                    img[idx3(&dims, z, y, x)] = 40.0;
                }
            }
        }
        for z in 1..4 {
            for y in 8..16 {
                for x in 8..16 {
                    img[idx3(&dims, z, y, x)] = 500.0;
                    msk[idx3(&dims, z, y, x)] = 1;
                }
            }
        }
        let v = Volume::new(dims, [3.0, 1.0, 1.0], img).unwrap();
        let m = LabelMask::new(dims, [3.0, 1.0, 1.0], msk).unwrap();
        vec![prepare_case(&v, &m, Scale::Global).unwrap()]
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let net = tiny_net();
        let cfg = TrainConfig {
            total_iterations: 0,
            batch_size: 1,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = train(&synthetic_cases(), &net, &cfg).unwrap();
        let init = init_params(&net, 7).unwrap();
        for (name, t) in out.params.tensors() {
            assert_eq!(t.data(), init.get(name).unwrap().data(), "{} differs", name);
        }
        assert!(out.loss_log.is_empty());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let net = tiny_net();
        let cfg = TrainConfig {
            total_iterations: 3,
            batch_size: 2,
            seed: 11,
            lr0: 1e-3,
            ..TrainConfig::default()
        };
        let cases = synthetic_cases();
        let a = train(&cases, &net, &cfg).unwrap();
        let b = train(&cases, &net, &cfg).unwrap();
        for (name, t) in a.params.tensors() {
            assert_eq!(t.data(), b.params.get(name).unwrap().data(), "{} differs", name);
        }
        assert_eq!(a.loss_log, b.loss_log);
        assert_eq!(a.loss_log.len(), 3);
        assert!(a.loss_log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn loss_log_renders_tab_separated() {
        let log = vec![
            LossRecord { iteration: 0, lr: 1e-4, loss: 0.75 },
            LossRecord { iteration: 1, lr: 1e-4, loss: 0.5 },
        ];
        let text = loss_log_lines(&log);
        assert_eq!(text, "0\t0.0001\t0.75\n1\t0.0001\t0.5\n");
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        // Wide enough that no ReLU plane can die wholesale at the 4x2x2
        // bottleneck, which would legitimately zero a branch.
        let net = NetworkConfig {
            base_channels: vec![4, 4, 4, 4],
            patch_shape: [4, 16, 16],
            ..Default::default()
        };
        let params = init_params(&net, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let [pd, ph, pw] = net.patch_shape;
        let voxels = pd * ph * pw;
        let image: Vec<f32> = (0..voxels).map(|_| {
            let v: f32 = StandardNormal.sample(&mut rng);
            v
        }).collect();
        let label: Vec<f32> =
            (0..voxels).map(|_| (rng.random_range(0.0..1.0) < 0.3) as u8 as f32).collect();
        let mut tape: GradTape<f32> = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, pd, ph, pw], image).unwrap());
        let g = tape.leaf(Tensor::from_vec(&[1, 1, pd, ph, pw], label).unwrap());
        // Eval mode: batch norm uses stored statistics, so bias gradients
        // are genuine rather than the near-zero residue of train mode.
        let out = unet_forward(&mut tape, x, &params, &net, Mode::Eval).unwrap();
        let loss = dice_loss(&mut tape, out.probs, g).unwrap();
        tape.backward(loss).unwrap();
        for (name, &id) in &out.param_ids {
            if !params.get(name).unwrap().requires_grad {
                continue;
            }
            let grad = tape.grad(id).unwrap_or_else(|| panic!("no grad for {}", name));
            assert!(grad.iter().any(|&v| v != 0.0), "gradient of {} is identically zero", name);
        }
    }
}
