//! Two-stage training: auto-encoder pretraining on complete clouds, then
//! completion training with feature alignment against the frozen
//! pretrained encoder. Also schedules, run configuration and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_plan, BatchOrder, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    feat_match, gan_d_loss, gan_g_loss, interpolates, lsgan_losses, total_loss, CriticBatch,
    Estimator, KernelSpec, LossWeights,
};
use crate::network::{
    autoencoder_forward, complete, decode_coarse, decode_fine, encode, Bound, Critic, CriticHead,
    FpsStart, LatentPair, MlpCritic, ModelParams, NetConfig, Section,
};
use crate::pointops::{chamfer, chamfer_on_tape, fidelity_error, ChamferVariant, PointCloud};
use crate::tensor::{AdamConfig, Gradients, ParamStore, Real, Tape, Tensor, Var};

/// Which loss terms the completion generator optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Reconstruction only.
    Baseline,
    /// Reconstruction and feature matching.
    L2,
    /// Reconstruction and the least-squares adversarial loss.
    Ls,
    /// Reconstruction and the MMD adversarial loss.
    Mmd,
    /// Every term.
    L2Mmd,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::L2,
        Ablation::Ls,
        Ablation::Mmd,
        Ablation::L2Mmd,
    ];

    pub fn uses_feat(self) -> bool {
        matches!(self, Ablation::L2 | Ablation::L2Mmd)
    }

    pub fn uses_mmd(self) -> bool {
        matches!(self, Ablation::Mmd | Ablation::L2Mmd)
    }

    pub fn uses_critic(self) -> bool {
        self.uses_mmd() || self == Ablation::Ls
    }

    pub fn critic_head(self) -> CriticHead {
        if self == Ablation::Ls {
            CriticHead::Score
        } else {
            CriticHead::Embedding
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::L2 => "l2",
            Ablation::Ls => "ls",
            Ablation::Mmd => "mmd",
            Ablation::L2Mmd => "l2+mmd",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown ablation {s:?} (expected baseline, l2, ls, mmd or l2+mmd)"
                ))
            })
    }
}

/// Linear ramp of the fine-output reconstruction weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ramp {
    pub start: f64,
    pub end: f64,
    pub iters: u64,
}

/// Hyperparameters of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_epochs: u64,
    pub batch_size: usize,
    /// `lambda_f` here is ignored; the ramp sets it every step.
    pub weights: LossWeights,
    pub lambda_f_ramp: Ramp,
    pub d_steps_per_g: usize,
    pub epochs: u64,
    /// Stop after this many generator updates even mid-epoch.
    pub max_iters: Option<u64>,
    pub seed: u64,
    pub net: NetConfig,
    pub ablation: Ablation,
    pub kernel: KernelSpec,
    pub estimator: Estimator,
    pub gp_weight: f64,
    /// Chamfer convention of the reconstruction loss.
    pub loss_variant: ChamferVariant,
    /// Keep the reloaded decoder fixed during completion training.
    pub freeze_decoder: bool,
    pub val_fraction: f64,
    pub adam: AdamConfig,
    /// Initial bias value of every layer.
    pub init_bias: f64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_decay: 0.7,
            lr_decay_epochs: 20,
            batch_size: 32,
            weights: LossWeights::paper(),
            lambda_f_ramp: Ramp {
                start: 0.01,
                end: 1.0,
                iters: 50_000,
            },
            d_steps_per_g: 1,
            epochs: 100,
            max_iters: None,
            seed: 0,
            net: NetConfig::paper(16384),
            ablation: Ablation::L2Mmd,
            kernel: KernelSpec::default(),
            estimator: Estimator::Biased,
            gp_weight: 1.0,
            loss_variant: ChamferVariant::CdT,
            freeze_decoder: false,
            val_fraction: 0.1,
            adam: AdamConfig::default(),
            init_bias: 0.0,
        }
    }

    /// Desk-scale settings for clouds of 1024 points.
    pub fn toy() -> Self {
        TrainConfig {
            lr0: 1e-3,
            batch_size: 4,
            lambda_f_ramp: Ramp {
                start: 0.01,
                end: 1.0,
                iters: 1000,
            },
            epochs: 1000,
            net: NetConfig::toy(),
            ..TrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 = {} must be positive", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay = {} outside (0, 1]", self.lr_decay)));
        }
        if self.lr_decay_epochs == 0 {
            return Err(Error::config("lr_decay_epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.ablation.uses_critic() && self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch_size = {} but the {} ablation needs at least 2 samples per batch",
                self.batch_size, self.ablation
            )));
        }
        if self.ablation.uses_critic() && self.d_steps_per_g == 0 {
            return Err(Error::config("d_steps_per_g must be positive"));
        }
        LossWeights {
            lambda_f: self.lambda_f_ramp.start,
            ..self.weights
        }
        .validate()?;
        let r = self.lambda_f_ramp;
        if !(0.01..=1.0).contains(&r.start) || !(r.start..=1.0).contains(&r.end) {
            return Err(Error::config(format!(
                "lambda_f ramp {} → {} must stay within [0.01, 1] and not decrease",
                r.start, r.end
            )));
        }
        if !(self.gp_weight >= 0.0 && self.gp_weight.is_finite()) {
            return Err(Error::config(format!("gp_weight = {} must be non-negative", self.gp_weight)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "val_fraction = {} outside [0, 1)",
                self.val_fraction
            )));
        }
        self.kernel.validate()?;
        self.net.validate()
    }

    /// Every setting as `key = value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        fn list(v: &[usize]) -> String {
            v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        }
        let n = &self.net;
        let pairs: Vec<(&str, String)> = vec![
            ("lr0", self.lr0.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_decay_epochs", self.lr_decay_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lambda_re", self.weights.lambda_re.to_string()),
            ("lambda_gan", self.weights.lambda_gan.to_string()),
            ("lambda_fe", self.weights.lambda_fe.to_string()),
            ("lambda_f_start", self.lambda_f_ramp.start.to_string()),
            ("lambda_f_end", self.lambda_f_ramp.end.to_string()),
            ("lambda_f_ramp_iters", self.lambda_f_ramp.iters.to_string()),
            ("d_steps_per_g", self.d_steps_per_g.to_string()),
            ("epochs", self.epochs.to_string()),
            (
                "max_iters",
                self.max_iters.map_or("none".to_string(), |v| v.to_string()),
            ),
            ("seed", self.seed.to_string()),
            ("ablation", self.ablation.to_string()),
            (
                "kernel_alphas",
                self.kernel.alphas.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            ),
            (
                "estimator",
                match self.estimator {
                    Estimator::Biased => "biased",
                    Estimator::Unbiased => "unbiased",
                }
                .to_string(),
            ),
            ("gp_weight", self.gp_weight.to_string()),
            ("loss_variant", self.loss_variant.to_string()),
            ("freeze_decoder", self.freeze_decoder.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("init_bias", self.init_bias.to_string()),
            ("net.d1", n.d1.to_string()),
            ("net.d2", n.d2.to_string()),
            ("net.coarse_count", n.coarse_count.to_string()),
            ("net.mirror_sample", n.mirror_sample.to_string()),
            ("net.fine_count", n.fine_count.to_string()),
            ("net.encoder_mlp1", list(&n.encoder_mlp1)),
            ("net.encoder_mlp2", list(&n.encoder_mlp2)),
            ("net.coarse_fc", list(&n.coarse_fc)),
            ("net.fine_mlp", list(&n.fine_mlp)),
            ("net.critic_widths", list(&n.critic_widths)),
            ("net.grid_extent", n.grid_extent.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sets one key; unknown keys and unparsable values are config errors
    /// naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
        }
        fn list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
            value.split(',').map(|v| num(key, v)).collect()
        }
        let v = value.trim();
        match key.trim() {
            "lr0" => self.lr0 = num(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "lr_decay_epochs" => self.lr_decay_epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lambda_re" => self.weights.lambda_re = num(key, v)?,
            "lambda_gan" => self.weights.lambda_gan = num(key, v)?,
            "lambda_fe" => self.weights.lambda_fe = num(key, v)?,
            "lambda_f_start" => self.lambda_f_ramp.start = num(key, v)?,
            "lambda_f_end" => self.lambda_f_ramp.end = num(key, v)?,
            "lambda_f_ramp_iters" => self.lambda_f_ramp.iters = num(key, v)?,
            "d_steps_per_g" => self.d_steps_per_g = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "max_iters" => {
                self.max_iters = if v == "none" { None } else { Some(num(key, v)?) }
            }
            "seed" => self.seed = num(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "kernel_alphas" => self.kernel.alphas = list(key, v)?,
            "estimator" => {
                self.estimator = match v {
                    "biased" => Estimator::Biased,
                    "unbiased" => Estimator::Unbiased,
                    _ => return Err(Error::config(format!("estimator: unknown value {v:?}"))),
                }
            }
            "gp_weight" => self.gp_weight = num(key, v)?,
            "loss_variant" => self.loss_variant = v.parse()?,
            "freeze_decoder" => self.freeze_decoder = num(key, v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "adam_beta1" => self.adam.beta1 = num(key, v)?,
            "adam_beta2" => self.adam.beta2 = num(key, v)?,
            "adam_eps" => self.adam.eps = num(key, v)?,
            "init_bias" => self.init_bias = num(key, v)?,
            "net.d1" => self.net.d1 = num(key, v)?,
            "net.d2" => self.net.d2 = num(key, v)?,
            "net.coarse_count" => self.net.coarse_count = num(key, v)?,
            "net.mirror_sample" => self.net.mirror_sample = num(key, v)?,
            "net.fine_count" => self.net.fine_count = num(key, v)?,
            "net.encoder_mlp1" => self.net.encoder_mlp1 = list(key, v)?,
            "net.encoder_mlp2" => self.net.encoder_mlp2 = list(key, v)?,
            "net.coarse_fc" => self.net.coarse_fc = list(key, v)?,
            "net.fine_mlp" => self.net.fine_mlp = list(key, v)?,
            "net.critic_widths" => self.net.critic_widths = list(key, v)?,
            "net.grid_extent" => self.net.grid_extent = num(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// `lr0 · lr_decay^⌊epoch / lr_decay_epochs⌋`.
pub fn lr_at(cfg: &TrainConfig, epoch: u64) -> f64 {
    let k = epoch / cfg.lr_decay_epochs.max(1);
    cfg.lr0 * cfg.lr_decay.powi(k.min(i32::MAX as u64) as i32)
}

/// Linear ramp from `start` at iteration 0 to `end` at `iters`, flat after.
pub fn lambda_f_at(cfg: &TrainConfig, iter: u64) -> f64 {
    let r = cfg.lambda_f_ramp;
    if r.iters == 0 || iter >= r.iters {
        return r.end;
    }
    r.start + (r.end - r.start) * iter as f64 / r.iters as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Autoencoder,
    Completion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Autoencoder => "autoencoder",
            Stage::Completion => "completion",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoencoder" => Ok(Stage::Autoencoder),
            "completion" => Ok(Stage::Completion),
            _ => Err(Error::config(format!("unknown stage {s:?}"))),
        }
    }
}

/// Scalars recorded for one generator update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// Index of the update, starting at 0.
    pub iteration: u64,
    pub epoch: u64,
    pub lr: f64,
    pub lambda_f: f64,
    /// Loss components in a fixed order for the stage and ablation.
    pub losses: Vec<(&'static str, f64)>,
}

impl StepLog {
    pub fn loss(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(k, _)| *k == name).map(|(_, v)| *v)
    }

    /// `iter=… lr=… lambda_f=… name=value…` at full precision.
    pub fn line(&self) -> String {
        let mut s = format!("iter={} lr={} lambda_f={}", self.iteration, self.lr, self.lambda_f);
        for (k, v) in &self.losses {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }
}

/// A training run in progress: configuration, parameters with optimizer
/// state, and the position in the data stream. Everything random in a step
/// is drawn from a generator keyed by `(seed, stage, iteration)`, so this
/// state is all a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Session<T> {
    pub cfg: TrainConfig,
    pub stage: Stage,
    pub params: ModelParams<T>,
    /// Generator updates done so far.
    pub iteration: u64,
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub cursor: usize,
}

impl<T: Real> Session<T> {
    /// Fresh auto-encoder run.
    pub fn autoencoder(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ModelParams::init(&cfg.net, CriticHead::Embedding, &mut rng, cfg.init_bias)?;
        params.critic = ParamStore::new();
        params.frozen_critic = true;
        Ok(Session {
            cfg,
            stage: Stage::Autoencoder,
            params,
            iteration: 0,
            epoch: 0,
            cursor: 0,
        })
    }

    /// Completion run seeded from pretrained auto-encoder parameters: the
    /// decoder is reloaded (optimizer state reset), the pretrained encoder
    /// becomes the frozen feature target, and the completion encoder and
    /// critic start fresh.
    pub fn completion(cfg: TrainConfig, ae: &Session<T>) -> Result<Self> {
        cfg.validate()?;
        if ae.stage != Stage::Autoencoder {
            return Err(Error::config("pretrained checkpoint is not an auto-encoder run"));
        }
        let mut ae_net = ae.cfg.net.clone();
        ae_net.critic_widths = cfg.net.critic_widths.clone();
        ae_net.fine_count = cfg.net.fine_count;
        if ae_net != cfg.net {
            return Err(Error::config(
                "auto-encoder checkpoint network does not match the training network",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let head = cfg.ablation.critic_head();
        let mut params = ModelParams::init(&cfg.net, head, &mut rng, cfg.init_bias)?;
        params.decoder = fresh_state(&ae.params.decoder);
        params.target_encoder = Some(fresh_state(&ae.params.encoder));
        params.frozen_decoder = cfg.freeze_decoder;
        if !cfg.ablation.uses_critic() {
            params.critic = ParamStore::new();
            params.frozen_critic = true;
        }
        Ok(Session {
            cfg,
            stage: Stage::Completion,
            params,
            iteration: 0,
            epoch: 0,
            cursor: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at(&self.cfg, self.epoch)
    }

    /// True once the epoch budget or the iteration cap is used up.
    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_iters.is_some_and(|m| self.iteration >= m)
    }

    /// One generator update (preceded by the critic updates in adversarial
    /// completion runs) on the next batch of `data`.
    pub fn step(&mut self, data: &Dataset) -> Result<StepLog> {
        let plan = batch_plan(data.len(), self.cfg.batch_size, self.order());
        if plan.is_empty() {
            return Err(Error::config(format!(
                "{} training samples cannot fill a batch of {}",
                data.len(),
                self.cfg.batch_size
            )));
        }
        let batch = plan.get(self.cursor).ok_or_else(|| {
            Error::config(format!(
                "resume position {} is past the {} batches of an epoch",
                self.cursor,
                plan.len()
            ))
        })?;
        let partial: Vec<&PointCloud> = batch.iter().map(|&i| &data.samples[i].partial).collect();
        let full: Vec<&PointCloud> = batch.iter().map(|&i| &data.samples[i].complete).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(match self.stage {
            Stage::Autoencoder => 2 * self.iteration,
            Stage::Completion => 2 * self.iteration + 1,
        });
        let lr = self.lr();
        let lambda_f = lambda_f_at(&self.cfg, self.iteration);
        let losses = match self.stage {
            Stage::Autoencoder => self.autoencoder_step(&full, lr, lambda_f, &mut rng)?,
            Stage::Completion => self.completion_step(&partial, &full, lr, lambda_f, &mut rng)?,
        };
        if let Some((name, v)) = losses.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{name} = {v} at iteration {}",
                self.iteration
            )));
        }
        if !self.params.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters after iteration {}",
                self.iteration
            )));
        }
        let log = StepLog {
            iteration: self.iteration,
            epoch: self.epoch,
            lr,
            lambda_f,
            losses,
        };
        self.cursor += 1;
        self.iteration += 1;
        if self.cursor == plan.len() {
            self.epoch += 1;
            self.cursor = 0;
        }
        Ok(log)
    }

    /// Steps until `iterations` more updates are done or the run finishes,
    /// handing every log to `on_step`.
    pub fn run(
        &mut self,
        data: &Dataset,
        iterations: u64,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<()> {
        let target = self.iteration + iterations;
        while self.iteration < target && !self.finished() {
            let log = self.step(data)?;
            on_step(&log)?;
        }
        Ok(())
    }

    fn order(&self) -> BatchOrder {
        BatchOrder::Train {
            seed: self.cfg.seed,
            epoch: self.epoch,
        }
    }

    fn autoencoder_step(
        &mut self,
        complete: &[&PointCloud],
        lr: f64,
        lambda_f: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(&'static str, f64)>> {
        let net = &self.cfg.net;
        let y = PointCloud::batch_tensor::<T>(complete)?;
        let mut tape = Tape::new();
        let enc = Bound::new(&mut tape, &self.params.encoder, !self.params.frozen_encoder)?;
        let dec = Bound::new(&mut tape, &self.params.decoder, !self.params.frozen_decoder)?;
        let out = autoencoder_forward(&mut tape, &enc, &dec, net, &y, FpsStart::Random(rng.gen()))?;
        let target = tape.constant(y);
        let terms = recon_terms(
            &mut tape,
            out.coarse,
            out.fine.points,
            target,
            lambda_f,
            self.cfg.loss_variant,
        )?;
        let grads = tape.backward(terms.recon)?;
        let losses = vec![
            ("cd_coarse", value(&tape, terms.coarse)),
            ("cd_fine", value(&tape, terms.fine)),
            ("recon", value(&tape, terms.recon)),
        ];
        self.apply(&grads, &[Section::Encoder, Section::Decoder], lr)?;
        Ok(losses)
    }

    fn completion_step(
        &mut self,
        partial: &[&PointCloud],
        complete: &[&PointCloud],
        lr: f64,
        lambda_f: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(&'static str, f64)>> {
        let cfg = self.cfg.clone();
        let net = &cfg.net;
        let ablation = cfg.ablation;
        let head = ablation.critic_head();
        let x = PointCloud::batch_tensor::<T>(partial)?;
        let y = PointCloud::batch_tensor::<T>(complete)?;
        let target_store = self
            .params
            .target_encoder
            .as_ref()
            .ok_or_else(|| Error::config("completion run has no pretrained target encoder"))?;
        let (t1, t2) = features(target_store, net, &y)?;
        let real_feat = join_rows(&t1, &t2)?;

        let mut critic_terms = Vec::new();
        if ablation.uses_critic() {
            let (p1, p2) = features(&self.params.encoder, net, &x)?;
            let fake_feat = join_rows(&p1, &p2)?;
            let b = partial.len();
            let (mut d_loss, mut penalty) = (0.0, 0.0);
            for _ in 0..cfg.d_steps_per_g {
                let mut tape = Tape::new();
                let bound = Bound::new(&mut tape, &self.params.critic, !self.params.frozen_critic)?;
                let critic = MlpCritic {
                    bound: &bound,
                    cfg: net,
                    head,
                };
                let real = tape.constant(real_feat.clone());
                let fake = tape.constant(fake_feat.clone());
                let er = critic.embed(&mut tape, real)?;
                let ef = critic.embed(&mut tape, fake)?;
                let loss = if ablation.uses_mmd() {
                    let theta: Vec<f64> =
                        (0..b).map(|_| rng.gen::<f64>().max(f64::EPSILON)).collect();
                    let mixed = interpolates(&real_feat, &fake_feat, &theta)?;
                    let batch = CriticBatch {
                        real: er,
                        fake: ef,
                        interp_inputs: Some(tape.constant(mixed)),
                    };
                    let out = gan_d_loss(&mut tape, &batch, &cfg.kernel, cfg.estimator, &critic, cfg.gp_weight)?;
                    penalty = value(&tape, out.penalty);
                    out.loss
                } else {
                    lsgan_losses(&mut tape, er, ef)?.1
                };
                d_loss = value(&tape, loss);
                let grads = tape.backward(loss)?;
                self.apply(&grads, &[Section::Critic], lr)?;
            }
            critic_terms.push(("critic", d_loss));
            if ablation.uses_mmd() {
                critic_terms.push(("penalty", penalty));
            }
        }

        let mut tape = Tape::new();
        let enc = Bound::new(&mut tape, &self.params.encoder, !self.params.frozen_encoder)?;
        let dec = Bound::new(&mut tape, &self.params.decoder, !self.params.frozen_decoder)?;
        let input = tape.constant(x.clone());
        let latent = encode(&mut tape, &enc, net, input)?;
        let coarse = decode_coarse(&mut tape, &dec, net, latent.f2)?;
        let fine = decode_fine(&mut tape, &dec, net, latent.f2, coarse, &x, FpsStart::Random(rng.gen()))?;
        let target = tape.constant(y);
        let terms = recon_terms(&mut tape, coarse, fine.points, target, lambda_f, cfg.loss_variant)?;
        let feat = if ablation.uses_feat() {
            let fy = LatentPair {
                f1: tape.constant(t1),
                f2: tape.constant(t2),
            };
            Some(feat_match(&mut tape, latent, fy)?)
        } else {
            None
        };
        let gan = if ablation.uses_critic() {
            let bound = Bound::new(&mut tape, &self.params.critic, false)?;
            let critic = MlpCritic {
                bound: &bound,
                cfg: net,
                head,
            };
            let real = tape.constant(real_feat);
            let er = critic.embed(&mut tape, real)?;
            let joined = latent.joined(&mut tape)?;
            let ef = critic.embed(&mut tape, joined)?;
            Some(if ablation.uses_mmd() {
                let batch = CriticBatch {
                    real: er,
                    fake: ef,
                    interp_inputs: None,
                };
                gan_g_loss(&mut tape, &batch, &cfg.kernel, cfg.estimator)?
            } else {
                lsgan_losses(&mut tape, er, ef)?.0
            })
        } else {
            None
        };
        let weights = LossWeights {
            lambda_f,
            ..cfg.weights
        };
        let total = total_loss(&mut tape, terms.recon, gan, feat, &weights)?;
        let grads = tape.backward(total)?;
        let mut losses = vec![
            ("cd_coarse", value(&tape, terms.coarse)),
            ("cd_fine", value(&tape, terms.fine)),
            ("recon", value(&tape, terms.recon)),
        ];
        if let Some(f) = feat {
            losses.push(("feat", value(&tape, f)));
        }
        if let Some(g) = gan {
            losses.push(("gan_g", value(&tape, g)));
        }
        losses.extend(critic_terms);
        losses.push(("total", value(&tape, total)));
        self.apply(&grads, &[Section::Encoder, Section::Decoder], lr)?;
        Ok(losses)
    }

    fn apply(&mut self, grads: &Gradients<T>, sections: &[Section], lr: f64) -> Result<()> {
        let named = grads.named();
        let adam = self.cfg.adam;
        for &s in sections {
            if !self.params.is_frozen(s) {
                self.params.section_mut(s).adam_step(&named, lr, adam)?;
            }
        }
        Ok(())
    }
}

/// A copy of the parameter values with fresh optimizer state.
fn fresh_state<T: Real>(store: &ParamStore<T>) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (name, entry) in store.iter() {
        out.insert(name, entry.value.clone());
    }
    out
}

struct ReconTerms {
    coarse: Var,
    fine: Var,
    recon: Var,
}

fn recon_terms<T: Real>(
    tape: &mut Tape<T>,
    coarse: Var,
    fine: Var,
    y: Var,
    lambda_f: f64,
    variant: ChamferVariant,
) -> Result<ReconTerms> {
    let c = chamfer_on_tape(tape, coarse, y, variant)?;
    let f = chamfer_on_tape(tape, fine, y, variant)?;
    let weighted = tape.scale(f, T::of(lambda_f));
    let recon = tape.add(c, weighted)?;
    Ok(ReconTerms {
        coarse: c,
        fine: f,
        recon,
    })
}

fn value<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

/// `(f1, f2)` of an encoder on a batch, without gradients.
pub fn features<T: Real>(
    encoder: &ParamStore<T>,
    net: &NetConfig,
    clouds: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, encoder, false)?;
    let x = tape.constant(clouds.clone());
    let latent = encode(&mut tape, &bound, net, x)?;
    Ok((tape.value(latent.f1).clone(), tape.value(latent.f2).clone()))
}

fn join_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (wa, wb) = (a.shape()[1], b.shape()[1]);
    let rows = a.shape()[0];
    let mut data = Vec::with_capacity(rows * (wa + wb));
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * wa..(r + 1) * wa]);
        data.extend_from_slice(&b.data()[r * wb..(r + 1) * wb]);
    }
    Tensor::new(&[rows, wa + wb], data)
}

/// Evaluation metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Chamfer(ChamferVariant),
    /// Input-to-output fidelity error; needs no ground truth.
    Fidelity,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Chamfer(v) => v.fmt(f),
            Metric::Fidelity => f.write_str("fidelity"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fidelity" {
            Ok(Metric::Fidelity)
        } else {
            s.parse().map(Metric::Chamfer).map_err(|_| {
                Error::config(format!("unknown metric {s:?} (expected cd-t, cd-p or fidelity)"))
            })
        }
    }
}

/// Per-sample scores aggregated per category and overall.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub metric: Metric,
    pub resolution: usize,
    /// `(category, value)` in dataset order.
    pub samples: Vec<(String, f64)>,
    /// Category means in first-appearance order.
    pub categories: Vec<(String, f64)>,
    /// Mean over all samples.
    pub average: f64,
}

impl MetricTable {
    pub fn new(metric: Metric, resolution: usize, samples: Vec<(String, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("metric table"));
        }
        let mut categories: Vec<(String, f64, usize)> = Vec::new();
        for (c, v) in &samples {
            match categories.iter_mut().find(|(k, _, _)| k == c) {
                Some(entry) => {
                    entry.1 += v;
                    entry.2 += 1;
                }
                None => categories.push((c.clone(), *v, 1)),
            }
        }
        let average = samples.iter().map(|(_, v)| v).sum::<f64>() / samples.len() as f64;
        Ok(MetricTable {
            metric,
            resolution,
            categories: categories
                .into_iter()
                .map(|(c, s, n)| (c, s / n as f64))
                .collect(),
            samples,
            average,
        })
    }
}

/// Scores one output cloud per sample: Chamfer distance to the complete
/// cloud, or fidelity of the partial input to the output.
pub fn score(outputs: &[PointCloud], data: &Dataset, metric: Metric) -> Result<Vec<(String, f64)>> {
    if outputs.len() != data.len() {
        return Err(Error::config(format!(
            "{} outputs for {} samples",
            outputs.len(),
            data.len()
        )));
    }
    outputs
        .iter()
        .zip(&data.samples)
        .map(|(out, s)| {
            let v = match metric {
                Metric::Chamfer(variant) => chamfer(out, &s.complete, variant)?.total,
                Metric::Fidelity => fidelity_error(&s.partial, out)?,
            };
            Ok((s.category.clone(), v))
        })
        .collect()
}

/// Coarse and fine completions of every sample, in dataset order.
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    net: &NetConfig,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<(PointCloud, PointCloud)>> {
    let mut out = Vec::with_capacity(data.len());
    for batch in data.batches(batch_size, BatchOrder::Eval) {
        out.extend(complete(params, net, &batch.partial)?);
    }
    Ok(out)
}

/// Completes every sample at `resolution` and tabulates `metric`.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    net: &NetConfig,
    data: &Dataset,
    metric: Metric,
    resolution: usize,
    batch_size: usize,
) -> Result<MetricTable> {
    let net = net.with_resolution(resolution)?;
    let fine: Vec<PointCloud> = predict(params, &net, data, batch_size)?
        .into_iter()
        .map(|(_, f)| f)
        .collect();
    MetricTable::new(metric, resolution, score(&fine, data, metric)?)
}
