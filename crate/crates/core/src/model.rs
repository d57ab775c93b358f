//! Noise predictors: the closed-form Gaussian oracle and the trainable
//! mask-conditioned network, plus loss, gradients and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, gaussian_like};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::nn::{self, adam_step, AdamConfig, AdamState, Architecture, Network, Params, Real, Tensor};
use crate::schedule::NoiseSchedule;

/// Anything that maps `(x_t, M^target, t)` to a noise estimate.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &ImageGrid, m_target: &Mask, t: usize) -> Result<ImageGrid>;

    /// The schedule the predictor was built or trained with.
    fn schedule(&self) -> &NoiseSchedule;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_noise(&self, x_t: &ImageGrid, m_target: &Mask, t: usize) -> Result<ImageGrid> {
        (**self).predict_noise(x_t, m_target, t)
    }

    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
}

/// Independent per-pixel prior `N(mu0[c], sigma0[c]^2)` on clean data. Under this
/// prior the posterior mean of `x_0` given `x_t` is available in closed form, so
/// the noise estimate is the Bayes-optimal one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mu0: Vec<f64>,
    pub sigma0: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mu0: Vec<f64>, sigma0: Vec<f64>) -> Result<Self> {
        if mu0.is_empty() || mu0.len() != sigma0.len() {
            return Err(Error::Config(format!(
                "prior needs one mean and one deviation per channel, got {} and {}",
                mu0.len(),
                sigma0.len()
            )));
        }
        if mu0.iter().any(|m| !m.is_finite()) || sigma0.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("prior means must be finite and deviations positive".into()));
        }
        Ok(Self { mu0, sigma0 })
    }

    pub fn standard(channels: usize) -> Self {
        Self { mu0: vec![0.0; channels], sigma0: vec![1.0; channels] }
    }

    /// `E[x_0 | x_t]` for one scalar.
    pub fn posterior_mean(&self, x_t: f64, alpha_bar: f64, c: usize) -> f64 {
        let (mu, var) = (self.mu0[c], self.sigma0[c] * self.sigma0[c]);
        ((1.0 - alpha_bar) * mu + alpha_bar.sqrt() * var * x_t) / ((1.0 - alpha_bar) + alpha_bar * var)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserModel {
    Analytic { prior: GaussianPrior, schedule: NoiseSchedule },
    Network { net: Network, schedule: NoiseSchedule },
}

fn check_query(x_t: &ImageGrid, m_target: &Mask, t: usize, channels: usize, sched: &NoiseSchedule) -> Result<()> {
    x_t.ensure_mask_fits(m_target, "predict_noise target mask")?;
    if x_t.channels() != channels {
        return Err(Error::dims("predict_noise channels", channels, x_t.channels()));
    }
    sched.check_positive_timestep(t, "predict_noise")
}

/// Stacks images and masks into `[N, C + 1, H, W]`.
pub fn network_input<'a, R: Real>(items: impl IntoIterator<Item = (&'a ImageGrid, &'a Mask)>) -> Result<Tensor<R>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for (img, mask) in items {
        img.ensure_mask_fits(mask, "network input mask")?;
        let (h, w, c) = img.shape();
        match dims {
            None => dims = Some((h, w, c)),
            Some(d) if d != (h, w, c) => return Err(Error::dims("batch image shape", d, (h, w, c))),
            _ => {}
        }
        push_channel_first(img, &mut data);
        data.extend(mask.data().iter().map(|&m| R::lit(m as f64)));
        n += 1;
    }
    let (h, w, c) = dims.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok(Tensor::new(vec![n, c + 1, h, w], data))
}

fn push_channel_first<R: Real>(img: &ImageGrid, out: &mut Vec<R>) {
    let c = img.channels();
    for ch in 0..c {
        out.extend(img.data().iter().skip(ch).step_by(c).map(|&v| R::lit(v)));
    }
}

/// Stacks same-shape images into `[N, C, H, W]`.
pub fn stack_images<'a, R: Real>(imgs: impl IntoIterator<Item = &'a ImageGrid>) -> Result<Tensor<R>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in imgs {
        match dims {
            None => dims = Some(img.shape()),
            Some(d) if d != img.shape() => return Err(Error::dims("batch image shape", d, img.shape())),
            _ => {}
        }
        push_channel_first(img, &mut data);
        n += 1;
    }
    let (h, w, c) = dims.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok(Tensor::new(vec![n, c, h, w], data))
}

/// Sample `i` of an `[N, C, H, W]` tensor as a channel-last grid.
pub fn unstack_image<R: Real>(t: &Tensor<R>, i: usize) -> Result<ImageGrid> {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let src = &t.data()[i * c * plane..(i + 1) * c * plane];
    let mut data = vec![0.0; c * plane];
    for ch in 0..c {
        for p in 0..plane {
            data[p * c + ch] = src[ch * plane + p].to_f64().unwrap();
        }
    }
    ImageGrid::new(h, w, c, data).map_err(|_| Error::NonFinite("network output".into()))
}

impl DenoiserModel {
    pub fn analytic(prior: GaussianPrior, schedule: NoiseSchedule) -> Self {
        DenoiserModel::Analytic { prior, schedule }
    }

    pub fn network(net: Network, schedule: NoiseSchedule) -> Self {
        DenoiserModel::Network { net, schedule }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DenoiserModel::Analytic { .. } => "analytic-gaussian",
            DenoiserModel::Network { .. } => "network",
        }
    }

    pub fn as_network(&self) -> Option<&Network> {
        match self {
            DenoiserModel::Network { net, .. } => Some(net),
            DenoiserModel::Analytic { .. } => None,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            DenoiserModel::Analytic { prior, .. } => prior.mu0.len(),
            DenoiserModel::Network { net, .. } => net.architecture().image_channels(),
        }
    }

    /// Noise estimates for several queries at once; the network runs them as
    /// one batch.
    pub fn predict_noise_batch(&self, queries: &[(&ImageGrid, &Mask, usize)]) -> Result<Vec<ImageGrid>> {
        for &(x, m, t) in queries {
            check_query(x, m, t, self.channels(), self.schedule())?;
        }
        match self {
            DenoiserModel::Analytic { .. } => queries.iter().map(|&(x, m, t)| self.predict_noise(x, m, t)).collect(),
            DenoiserModel::Network { net, .. } => {
                if queries.is_empty() {
                    return Ok(Vec::new());
                }
                let input = network_input::<f32>(queries.iter().map(|&(x, m, _)| (x, m)))?;
                let ts: Vec<usize> = queries.iter().map(|q| q.2).collect();
                let out = net.forward(input, &ts)?;
                (0..queries.len()).map(|i| unstack_image(&out, i)).collect()
            }
        }
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, x_t: &ImageGrid, m_target: &Mask, t: usize) -> Result<ImageGrid> {
        check_query(x_t, m_target, t, self.channels(), self.schedule())?;
        match self {
            DenoiserModel::Analytic { prior, schedule } => {
                let ab = schedule.alpha_bar(t);
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let c = x_t.channels();
                let data = x_t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| (x - sa * prior.posterior_mean(x, ab, i % c)) / sb)
                    .collect();
                let (h, w, c) = x_t.shape();
                ImageGrid::new(h, w, c, data)
            }
            DenoiserModel::Network { .. } => Ok(self.predict_noise_batch(&[(x_t, m_target, t)])?.remove(0)),
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        match self {
            DenoiserModel::Analytic { schedule, .. } | DenoiserModel::Network { schedule, .. } => schedule,
        }
    }
}

/// How the learning rate evolves from its initial value over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Half-cosine from the initial rate down to zero at the last step.
    Cosine,
}

impl LrDecay {
    /// Multiplier for optimizer step `step` (1-based) of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine if total <= 1 => 1.0,
            LrDecay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / (total - 1) as f64).cos()),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    /// Initial learning rate.
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            architecture: Architecture::default(),
            learning_rate: adam.learning_rate,
            lr_decay: LrDecay::Constant,
            batch_size: 32,
            epochs: 300,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        self.architecture.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// A clean model-space image and its lesion mask (all-zero for lesion-free images).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: ImageGrid,
    pub lesion_mask: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DenoiserModel,
    pub history: Vec<LossRecord>,
}

impl Trained {
    /// Mean loss per epoch, epochs counted from 1.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.history)
    }
}

pub fn epoch_means(history: &[LossRecord]) -> Vec<f64> {
    let epochs = history.iter().map(|r| r.epoch).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); epochs];
    for r in history {
        sums[r.epoch - 1].0 += r.loss;
        sums[r.epoch - 1].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

fn check_batch(batch: &[TrainSample], ts: &[usize], eps: &[ImageGrid], sched: &NoiseSchedule) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("training batch must be nonempty".into()));
    }
    if ts.len() != batch.len() || eps.len() != batch.len() {
        return Err(Error::dims("per-sample draws", batch.len(), (ts.len(), eps.len())));
    }
    for &t in ts {
        sched.check_positive_timestep(t, "training timestep")?;
    }
    Ok(())
}

/// Network input and regression target for one batch: `x_t` from the clean
/// image and `eps` at `t`, concatenated with the lesion mask.
pub fn training_tensors<R: Real>(
    batch: &[TrainSample],
    ts: &[usize],
    eps: &[ImageGrid],
    sched: &NoiseSchedule,
) -> Result<(Tensor<R>, Tensor<R>)> {
    check_batch(batch, ts, eps, sched)?;
    let noisy: Vec<ImageGrid> = batch
        .iter()
        .zip(ts)
        .zip(eps)
        .map(|((s, &t), e)| forward_diffuse(&s.image, t, e, sched))
        .collect::<Result<_>>()?;
    let input = network_input(noisy.iter().zip(batch.iter().map(|s| &s.lesion_mask)))?;
    let target = stack_images(eps)?;
    Ok((input, target))
}

/// Mean squared noise-prediction error over the batch, pixels and channels.
pub fn loss(model: &DenoiserModel, batch: &[TrainSample], ts: &[usize], eps: &[ImageGrid]) -> Result<f64> {
    let sched = model.schedule();
    check_batch(batch, ts, eps, sched)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((s, &t), e) in batch.iter().zip(ts).zip(eps) {
        let x_t = forward_diffuse(&s.image, t, e, sched)?;
        let pred = model.predict_noise(&x_t, &s.lesion_mask, t)?;
        sum += pred.data().iter().zip(e.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        count += pred.data().len();
    }
    Ok(sum / count as f64)
}

/// Gradient of [`loss`] with respect to every network parameter.
pub fn backward(model: &DenoiserModel, batch: &[TrainSample], ts: &[usize], eps: &[ImageGrid]) -> Result<Params<f32>> {
    let DenoiserModel::Network { net, schedule } = model else {
        return Err(Error::Unsupported("backward on the analytic model has no parameters".into()));
    };
    let (input, target) = training_tensors::<f32>(batch, ts, eps, schedule)?;
    let (_, grads) = nn::loss_and_grads(net.architecture(), net.params(), input, ts, target, 1.0)?;
    let named = net.params().names().iter().cloned().zip(grads).collect();
    Params::new(net.architecture(), named)
}

/// Trains a fresh network. Every random draw (initialization, shuffling,
/// timesteps, noise) comes from one generator seeded with `cfg.rng_seed`.
pub fn train(dataset: &[TrainSample], cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<Trained> {
    train_with(dataset, cfg, sched, |_| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_with(
    dataset: &[TrainSample],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Trained> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let first = dataset[0].image.shape();
    if first.2 != cfg.architecture.image_channels() {
        return Err(Error::dims("training image channels", cfg.architecture.image_channels(), first.2));
    }
    for s in dataset {
        if s.image.shape() != first {
            return Err(Error::dims("training image shape", first, s.image.shape()));
        }
        s.image.ensure_mask_fits(&s.lesion_mask, "training lesion mask")?;
    }
    let m = cfg.architecture.size_multiple();
    if !first.0.is_multiple_of(m) || !first.1.is_multiple_of(m) {
        return Err(Error::Dimension(format!("image size {}x{} must be a multiple of {m}", first.0, first.1)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut net = Network::init(cfg.architecture.clone(), rng.gen())?;
    let mut state = AdamState::zeros(net.params().tensors());
    let mut adam = cfg.adam();
    let total_steps = cfg.epochs * dataset.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let ts: Vec<usize> = batch.iter().map(|_| rng.gen_range(1..=sched.steps())).collect();
            let eps: Vec<ImageGrid> = batch.iter().map(|s| gaussian_like(&s.image, &mut rng)).collect();
            let (input, target) = training_tensors::<f32>(&batch, &ts, &eps, sched)?;
            let (value, grads) = nn::loss_and_grads(net.architecture(), net.params(), input, &ts, target, 1.0)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            adam.learning_rate = cfg.learning_rate * cfg.lr_decay.factor(step, total_steps);
            adam_step(net.params_mut().tensors_mut(), &grads, &mut state, step as u64, &adam)?;
            if !net.params().all_finite() {
                return Err(Error::NonFinite(format!("parameters after epoch {epoch}, step {step}")));
            }
            let rec = LossRecord { epoch, step, loss: value };
            on_step(&rec);
            history.push(rec);
        }
        log::info!("epoch {epoch}: mean loss {:.5}", epoch_means(&history)[epoch - 1]);
    }
    Ok(Trained { model: DenoiserModel::network(net, sched.clone()), history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::estimate_x0;
    use crate::nn::MlpSpec;

    fn cosine() -> NoiseSchedule {
        NoiseSchedule::cosine(1000, 0.008).unwrap()
    }

    #[test]
    fn analytic_worked_example() {
        // alpha_bar_1 = 0.25 makes the hand numbers exact
        let sched = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let m = DenoiserModel::analytic(GaussianPrior::standard(1), sched);
        let x = ImageGrid::new(1, 1, 1, vec![2.0]).unwrap();
        let e = m.predict_noise(&x, &Mask::zeros(1, 1), 1).unwrap();
        assert!((e.data()[0] - 1.5 / 0.75f64.sqrt()).abs() < 1e-12);
        let x0 = estimate_x0(&x, &e, 1, m.schedule()).unwrap();
        assert!((x0.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_estimate_matches_posterior_mean_across_schedule() {
        let prior = GaussianPrior::new(vec![0.3, -0.2], vec![0.5, 1.4]).unwrap();
        let m = DenoiserModel::analytic(prior.clone(), cosine());
        let x = ImageGrid::from_fn(3, 3, 2, |y, xx, c| (y as f64 - xx as f64) * 0.7 + c as f64);
        let mask = Mask::zeros(3, 3);
        for t in (1..=999).step_by(7) {
            let e = m.predict_noise(&x, &mask, t).unwrap();
            let x0 = estimate_x0(&x, &e, t, m.schedule()).unwrap();
            let ab = m.schedule().alpha_bar(t);
            for (i, (&got, &xt)) in x0.data().iter().zip(x.data()).enumerate() {
                let want = prior.posterior_mean(xt, ab, i % 2);
                assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "t={t}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn analytic_tends_to_prior_mean_without_signal() {
        let p = GaussianPrior::new(vec![0.4], vec![1.0]).unwrap();
        assert!((p.posterior_mean(5.0, 1e-12, 0) - 0.4).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_queries() {
        let m = DenoiserModel::analytic(GaussianPrior::standard(2), cosine());
        let x = ImageGrid::zeros(4, 4, 2);
        assert!(matches!(m.predict_noise(&x, &Mask::zeros(3, 4), 5), Err(Error::Dimension(_))));
        assert!(matches!(m.predict_noise(&x, &Mask::zeros(4, 4), 0), Err(Error::Domain(_))));
        assert!(matches!(m.predict_noise(&ImageGrid::zeros(4, 4, 1), &Mask::zeros(4, 4), 5), Err(Error::Dimension(_))));
        let s = TrainSample { image: x.clone(), lesion_mask: Mask::zeros(4, 4) };
        assert!(matches!(backward(&m, &[s], &[3], &[x]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn layout_conversions_round_trip() {
        let a = ImageGrid::from_fn(2, 3, 2, |y, x, c| (y * 10 + x) as f64 + 0.5 * c as f64);
        let mask = Mask::from_fn(2, 3, |y, x| y == x);
        let input: Tensor<f64> = network_input([(&a, &mask)]).unwrap();
        assert_eq!(input.shape(), &[1, 3, 2, 3]);
        assert_eq!(&input.data()[..6], &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(&input.data()[12..], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let stacked: Tensor<f64> = stack_images([&a, &a]).unwrap();
        assert_eq!(unstack_image(&stacked, 1).unwrap(), a);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn cosine_decay_runs_from_one_to_zero() {
        assert_eq!(LrDecay::Cosine.factor(1, 100), 1.0);
        assert!(LrDecay::Cosine.factor(100, 100).abs() < 1e-15);
        assert!((LrDecay::Cosine.factor(50, 99) - 0.5).abs() < 1e-12);
        assert_eq!(LrDecay::Cosine.factor(1, 1), 1.0);
        assert_eq!(LrDecay::Constant.factor(7, 10), 1.0);
    }

    #[test]
    fn loss_of_oracle_and_of_zero_predictor() {
        let sched = cosine();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = ImageGrid::zeros(8, 8, 2);
        let batch: Vec<TrainSample> =
            (0..8).map(|_| TrainSample { image: img.clone(), lesion_mask: Mask::zeros(8, 8) }).collect();
        let ts: Vec<usize> = (0..8).map(|i| 100 + i * 100).collect();
        let eps: Vec<ImageGrid> = batch.iter().map(|s| gaussian_like(&s.image, &mut rng)).collect();
        // with clean images identically zero and a point-mass-like prior, the
        // oracle recovers eps almost exactly
        let tight = DenoiserModel::analytic(GaussianPrior::new(vec![0.0; 2], vec![1e-9; 2]).unwrap(), sched.clone());
        assert!(loss(&tight, &batch, &ts, &eps).unwrap() < 1e-12);
        // a flat prior says x_0 = x_t / sqrt(ab), i.e. eps_hat ~ 0
        let flat = DenoiserModel::analytic(GaussianPrior::new(vec![0.0; 2], vec![1e9; 2]).unwrap(), sched);
        let l = loss(&flat, &batch, &ts, &eps).unwrap();
        let n = (8 * 8 * 2 * 8) as f64;
        assert!((l - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "loss {l}");
        let mut rev = batch.clone();
        rev.reverse();
        let (mut ts_r, mut eps_r) = (ts.clone(), eps.clone());
        ts_r.reverse();
        eps_r.reverse();
        assert!((loss(&flat, &rev, &ts_r, &eps_r).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_reports_progress() {
        let sched = NoiseSchedule::cosine(50, 0.008).unwrap();
        let data: Vec<TrainSample> = (0..6)
            .map(|k| TrainSample {
                image: ImageGrid::from_fn(4, 4, 2, |y, x, c| ((y + x + c + k) % 3) as f64 * 0.5 - 0.5),
                lesion_mask: Mask::from_fn(4, 4, |y, x| k % 2 == 0 && y == x),
            })
            .collect();
        let cfg = TrainConfig {
            architecture: Architecture::Mlp(MlpSpec {
                hidden: 8,
                layers: 1,
                time_dim: 4,
                embed_dim: 8,
                image_channels: 2,
            }),
            batch_size: 4,
            epochs: 3,
            rng_seed: 17,
            ..Default::default()
        };
        let mut seen = 0;
        let a = train_with(&data, &cfg, &sched, |_| seen += 1).unwrap();
        let b = train(&data, &cfg, &sched).unwrap();
        assert_eq!(seen, 6);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.epoch_means().len(), 3);
        let c = train(&data, &TrainConfig { rng_seed: 18, ..cfg }, &sched).unwrap();
        assert_ne!(a.model, c.model);
    }
}
