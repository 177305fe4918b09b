//! Encoder, coarse-to-fine decoder and critic.
//!
//! All widths come from [`NetConfig`], so the same code runs at the full
//! published size (`NetConfig::paper`) and at desk scale.
//!
//! Weights are stored as `[in, out]` matrices and applied per point, so a
//! shared MLP over `[b, n, in]` is one matrix product against the flattened
//! points.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pointops::{folding_grid, fps_flat, mirror_xy_flat, PointCloud};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Width of the first global feature.
    pub d1: usize,
    /// Width of the second global feature.
    pub d2: usize,
    pub coarse_count: usize,
    /// Points kept by FPS from the mirrored partial input.
    pub mirror_sample: usize,
    /// Output resolution N.
    pub fine_count: usize,
    pub encoder_mlp1: Vec<usize>,
    pub encoder_mlp2: Vec<usize>,
    pub coarse_fc: Vec<usize>,
    pub fine_mlp: Vec<usize>,
    pub critic_widths: Vec<usize>,
    pub grid_extent: f64,
}

impl NetConfig {
    /// Full-size network at output resolution `fine_count`.
    pub fn paper(fine_count: usize) -> Self {
        NetConfig {
            d1: 256,
            d2: 1024,
            coarse_count: 1024,
            mirror_sample: 512,
            fine_count,
            encoder_mlp1: vec![128, 256],
            encoder_mlp2: vec![512, 1024],
            coarse_fc: vec![1024, 1024, 3072],
            fine_mlp: vec![512, 512, 3],
            critic_widths: vec![512, 128],
            grid_extent: 0.05,
        }
    }

    /// The smallest configuration used for gradient verification.
    pub fn tiny() -> Self {
        NetConfig {
            d1: 8,
            d2: 16,
            coarse_count: 16,
            mirror_sample: 16,
            fine_count: 64,
            encoder_mlp1: vec![8, 8],
            encoder_mlp2: vec![16, 16],
            coarse_fc: vec![16, 16, 48],
            fine_mlp: vec![16, 16, 3],
            critic_widths: vec![8, 4],
            grid_extent: 0.05,
        }
    }

    /// Desk-scale network for clouds of about a thousand points.
    pub fn toy() -> Self {
        NetConfig {
            d1: 32,
            d2: 64,
            coarse_count: 64,
            mirror_sample: 128,
            fine_count: 1024,
            encoder_mlp1: vec![32, 32],
            encoder_mlp2: vec![64, 64],
            coarse_fc: vec![128, 128, 192],
            fine_mlp: vec![64, 64, 3],
            critic_widths: vec![32, 16],
            grid_extent: 0.05,
        }
    }

    /// Folding ratio N / coarse_count.
    pub fn ratio(&self) -> usize {
        self.fine_count / self.coarse_count.max(1)
    }

    /// Width of the per-point feature fed to the fine MLP.
    pub fn f3_width(&self) -> usize {
        3 + 2 + self.d2
    }

    pub fn critic_input(&self) -> usize {
        self.d1 + self.d2
    }

    pub fn critic_layers(&self, head: CriticHead) -> Vec<usize> {
        let mut widths = self.critic_widths.clone();
        if head == CriticHead::Score {
            widths.push(1);
        }
        widths
    }

    /// A copy at another output resolution.
    pub fn with_resolution(&self, fine_count: usize) -> Result<Self> {
        let cfg = NetConfig {
            fine_count,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d1", self.d1),
            ("d2", self.d2),
            ("coarse_count", self.coarse_count),
            ("mirror_sample", self.mirror_sample),
            ("fine_count", self.fine_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.fine_count % self.coarse_count != 0 {
            return Err(Error::config(format!(
                "fine_count {} must be a multiple of coarse_count {}",
                self.fine_count, self.coarse_count
            )));
        }
        let ends = [
            ("encoder_mlp1", &self.encoder_mlp1, self.d1),
            ("encoder_mlp2", &self.encoder_mlp2, self.d2),
            ("coarse_fc", &self.coarse_fc, 3 * self.coarse_count),
            ("fine_mlp", &self.fine_mlp, 3),
        ];
        for (name, widths, last) in ends {
            if widths.last() != Some(&last) {
                return Err(Error::config(format!(
                    "{name} {widths:?} must end at width {last}"
                )));
            }
        }
        let lists = [
            ("encoder_mlp1", &self.encoder_mlp1),
            ("encoder_mlp2", &self.encoder_mlp2),
            ("coarse_fc", &self.coarse_fc),
            ("fine_mlp", &self.fine_mlp),
            ("critic_widths", &self.critic_widths),
        ];
        for (name, widths) in lists {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::config(format!(
                    "{name} {widths:?} must be non-empty positive widths"
                )));
            }
        }
        if !(self.grid_extent.is_finite() && self.grid_extent > 0.0) {
            return Err(Error::config(format!(
                "grid_extent {} must be positive",
                self.grid_extent
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes of every section.
    pub fn param_shapes(&self, head: CriticHead) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        let mut stack = |prefix: &str, input: usize, widths: &[usize]| {
            let mut fan_in = input;
            for (i, &w) in widths.iter().enumerate() {
                shapes.insert(format!("{prefix}.{i}.weight"), vec![fan_in, w]);
                shapes.insert(format!("{prefix}.{i}.bias"), vec![w]);
                fan_in = w;
            }
        };
        stack("encoder.mlp1", 3, &self.encoder_mlp1);
        stack("encoder.mlp2", 2 * self.d1, &self.encoder_mlp2);
        stack("decoder.coarse", self.d2, &self.coarse_fc);
        stack("decoder.fine", self.f3_width(), &self.fine_mlp);
        stack("critic", self.critic_input(), &self.critic_layers(head));
        shapes
    }
}

/// What the critic emits: an embedding for the MMD kernel, or a single
/// score (an extra width-1 layer) for least-squares GAN training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticHead {
    Embedding,
    Score,
}

/// Which parameter section a name belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Section {
    Encoder,
    Decoder,
    Critic,
}

impl Section {
    pub fn of(name: &str) -> Option<Section> {
        if name.starts_with("encoder.") {
            Some(Section::Encoder)
        } else if name.starts_with("decoder.") {
            Some(Section::Decoder)
        } else if name.starts_with("critic.") {
            Some(Section::Critic)
        } else {
            None
        }
    }
}

/// Parameters of one model: encoder, decoder and critic sections, plus an
/// optional frozen copy of a pretrained encoder that supplies target
/// features.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: ParamStore<T>,
    pub decoder: ParamStore<T>,
    pub critic: ParamStore<T>,
    pub target_encoder: Option<ParamStore<T>>,
    pub frozen_encoder: bool,
    pub frozen_decoder: bool,
    pub frozen_critic: bool,
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters: uniform fan-in scaled weights, biases set to
    /// `bias`.
    pub fn init(cfg: &NetConfig, head: CriticHead, rng: &mut impl Rng, bias: f64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ModelParams {
            encoder: ParamStore::new(),
            decoder: ParamStore::new(),
            critic: ParamStore::new(),
            target_encoder: None,
            frozen_encoder: false,
            frozen_decoder: false,
            frozen_critic: false,
        };
        let shapes = cfg.param_shapes(head);
        // weights feeding a relu get the wider bound
        let last_layers = [
            format!("encoder.mlp1.{}.weight", cfg.encoder_mlp1.len() - 1),
            format!("encoder.mlp2.{}.weight", cfg.encoder_mlp2.len() - 1),
            format!("decoder.coarse.{}.weight", cfg.coarse_fc.len() - 1),
            format!("decoder.fine.{}.weight", cfg.fine_mlp.len() - 1),
            format!("critic.{}.weight", cfg.critic_layers(head).len() - 1),
        ];
        for (name, shape) in shapes {
            let value = if name.ends_with(".weight") {
                let gain = if last_layers.contains(&name) { 1.0 } else { 6.0 };
                let bound = (gain / shape[0] as f64).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| T::of(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(&shape, data)?
            } else {
                Tensor::full(&shape, T::of(bias))
            };
            params.section_mut(Section::of(&name).expect("prefixed name")).insert(name, value);
        }
        Ok(params)
    }

    pub fn section(&self, s: Section) -> &ParamStore<T> {
        match s {
            Section::Encoder => &self.encoder,
            Section::Decoder => &self.decoder,
            Section::Critic => &self.critic,
        }
    }

    pub fn section_mut(&mut self, s: Section) -> &mut ParamStore<T> {
        match s {
            Section::Encoder => &mut self.encoder,
            Section::Decoder => &mut self.decoder,
            Section::Critic => &mut self.critic,
        }
    }

    pub fn is_frozen(&self, s: Section) -> bool {
        match s {
            Section::Encoder => self.frozen_encoder,
            Section::Decoder => self.frozen_decoder,
            Section::Critic => self.frozen_critic,
        }
    }

    /// Checks every section against the shapes `cfg` implies. An empty
    /// critic section is accepted.
    pub fn check_shapes(&self, cfg: &NetConfig, head: CriticHead) -> Result<()> {
        let expected = cfg.param_shapes(head);
        let mut seen = 0;
        for s in [Section::Encoder, Section::Decoder, Section::Critic] {
            for (name, entry) in self.section(s).iter() {
                let want = expected
                    .get(name)
                    .ok_or_else(|| Error::config(format!("unexpected parameter {name}")))?;
                if entry.value.shape() != want.as_slice() {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, config implies {want:?}",
                        entry.value.shape()
                    )));
                }
                seen += 1;
            }
        }
        // runs without an adversarial term carry no critic
        let implied = expected
            .keys()
            .filter(|n| !(self.critic.is_empty() && Section::of(n) == Some(Section::Critic)))
            .count();
        if seen != implied {
            return Err(Error::config(format!(
                "{seen} parameters present, config implies {implied}"
            )));
        }
        if let Some(target) = &self.target_encoder {
            for (name, entry) in target.iter() {
                if expected.get(name).map(Vec::as_slice) != Some(entry.value.shape()) {
                    return Err(Error::config(format!(
                        "target encoder parameter {name} does not match config"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.all_finite()
            && self.decoder.all_finite()
            && self.critic.all_finite()
            && self.target_encoder.as_ref().is_none_or(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            critic: self.critic.cast(),
            target_encoder: self.target_encoder.as_ref().map(|t| t.cast()),
            frozen_encoder: self.frozen_encoder,
            frozen_decoder: self.frozen_decoder,
            frozen_critic: self.frozen_critic,
        }
    }
}

/// Parameters of one section recorded on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every entry of `store` on the tape, as named trainable
    /// parameters or as constants.
    pub fn new<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, entry) in store.iter() {
            let var = if trainable {
                tape.param(name, entry.value.clone())?
            } else {
                tape.constant(entry.value.clone())
            };
            vars.insert(name.to_string(), var);
        }
        Ok(Bound { vars })
    }

    /// Binds vars already on a tape under parameter names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }
}

/// Applies a stack of dense layers over the last axis, relu between layers
/// and none after the last.
pub fn mlp<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    input: Var,
    widths: &[usize],
) -> Result<Var> {
    let mut h = input;
    for (i, &w) in widths.iter().enumerate() {
        h = dense(tape, bound, &format!("{prefix}.{i}"), h, w)?;
        if i + 1 < widths.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn dense<T: Real>(tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var, out: usize) -> Result<Var> {
    let w = bound.get(&format!("{name}.weight"))?;
    let b = bound.get(&format!("{name}.bias"))?;
    let input = *tape.shape(x).last().unwrap_or(&0);
    if tape.shape(w) != [input, out] || tape.shape(b) != [out] {
        return Err(Error::config(format!(
            "layer {name} has weight {:?}, expected [{input}, {out}]",
            tape.shape(w)
        )));
    }
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

/// The two global features of a batch of clouds.
#[derive(Clone, Copy, Debug)]
pub struct LatentPair {
    /// `[b, d1]`
    pub f1: Var,
    /// `[b, d2]`
    pub f2: Var,
}

impl LatentPair {
    /// `[b, d1 + d2]` concatenation used as critic input.
    pub fn joined<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.concat(&[self.f1, self.f2], 1)
    }
}

/// Two-step point feature extraction: a shared MLP with max pooling gives
/// f1; f1 tiled onto the per-point features and a second shared MLP with
/// max pooling gives f2.
pub fn encode<T: Real>(tape: &mut Tape<T>, enc: &Bound, cfg: &NetConfig, x: Var) -> Result<LatentPair> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dim("encode", format!("expected [b, n, 3], got {s:?}")));
    }
    if s[1] == 0 {
        return Err(Error::EmptyInput("encode"));
    }
    let n = s[1];
    let point_feat = mlp(tape, enc, "encoder.mlp1", x, &cfg.encoder_mlp1)?;
    let f1 = tape.max_over_points(point_feat)?;
    let global = tape.reshape(f1, &[s[0], 1, cfg.d1])?;
    let global = tape.tile(global, 1, n)?;
    let joined = tape.concat(&[point_feat, global], 2)?;
    let h = mlp(tape, enc, "encoder.mlp2", joined, &cfg.encoder_mlp2)?;
    let f2 = tape.max_over_points(h)?;
    Ok(LatentPair { f1, f2 })
}

/// Fully connected stack on f2 reshaped to `[b, coarse_count, 3]`.
pub fn decode_coarse<T: Real>(tape: &mut Tape<T>, dec: &Bound, cfg: &NetConfig, f2: Var) -> Result<Var> {
    let s = tape.shape(f2).to_vec();
    if s.len() != 2 || s[1] != cfg.d2 {
        return Err(Error::config(format!(
            "decode_coarse expects [b, {}], got {s:?}",
            cfg.d2
        )));
    }
    let flat = mlp(tape, dec, "decoder.coarse", f2, &cfg.coarse_fc)?;
    tape.reshape(flat, &[s[0], cfg.coarse_count, 3])
}

/// Where FPS starts in the decoder's subsampling steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FpsStart {
    /// Always the first point.
    #[default]
    First,
    /// A start index per call drawn from a generator seeded with this value.
    Random(u64),
}

/// Outputs of the fine stage.
#[derive(Clone, Copy, Debug)]
pub struct FineOutput {
    /// `[b, N, 3]` dense output.
    pub points: Var,
    /// `[b, coarse_count, 3]` seed centers the output is grown around.
    pub centers: Var,
    /// `[b, N, 5 + d2]` per-point feature consumed by the fine MLP.
    pub f3: Var,
}

/// Fine stage: mirrored and subsampled partial points join the coarse
/// output, FPS picks `coarse_count` seed centers, and each center grows into
/// `N / coarse_count` points from its tiled coordinates, a folding grid and
/// f2. The fine MLP predicts offsets from the tiled centers.
pub fn decode_fine<T: Real>(
    tape: &mut Tape<T>,
    dec: &Bound,
    cfg: &NetConfig,
    f2: Var,
    coarse: Var,
    partial: &Tensor<T>,
    start: FpsStart,
) -> Result<FineOutput> {
    if cfg.fine_count % cfg.coarse_count != 0 {
        return Err(Error::config(format!(
            "fine_count {} is not a multiple of coarse_count {}",
            cfg.fine_count, cfg.coarse_count
        )));
    }
    let cs = tape.shape(coarse).to_vec();
    if cs.len() != 3 || cs[1] != cfg.coarse_count || cs[2] != 3 {
        return Err(Error::config(format!(
            "coarse cloud {cs:?} does not hold {} points",
            cfg.coarse_count
        )));
    }
    let b = cs[0];
    let ps = partial.shape();
    if ps.len() != 3 || ps[0] != b || ps[2] != 3 {
        return Err(Error::dim(
            "decode_fine",
            format!("partial input {ps:?} does not match batch {b}"),
        ));
    }
    if ps[1] == 0 {
        return Err(Error::EmptyInput("decode_fine"));
    }
    let np = ps[1];
    let mut seed_rng = match start {
        FpsStart::First => None,
        FpsStart::Random(s) => Some(ChaCha8Rng::seed_from_u64(s)),
    };
    let mut pick_start = |n: usize| seed_rng.as_mut().map_or(0, |r| r.gen_range(0..n));

    let mut mirrored = Vec::with_capacity(b * cfg.mirror_sample * 3);
    for bi in 0..b {
        let src = &partial.data()[bi * np * 3..(bi + 1) * np * 3];
        let mirror = mirror_xy_flat(src);
        let idx = fps_flat(&mirror, cfg.mirror_sample, pick_start(2 * np))?;
        mirrored.extend(idx.iter().flat_map(|&i| [mirror[i * 3], mirror[i * 3 + 1], mirror[i * 3 + 2]]));
    }
    let mirrored = tape.constant(Tensor::new(&[b, cfg.mirror_sample, 3], mirrored)?);
    let combined = tape.concat(&[mirrored, coarse], 1)?;
    let pool = cfg.mirror_sample + cfg.coarse_count;
    let mut centers_idx = Vec::with_capacity(b * cfg.coarse_count);
    {
        let values = tape.value(combined).data();
        for bi in 0..b {
            let src = &values[bi * pool * 3..(bi + 1) * pool * 3];
            centers_idx.extend(fps_flat(src, cfg.coarse_count, pick_start(pool))?);
        }
    }
    let centers = tape.gather_points(combined, &centers_idx, cfg.coarse_count)?;

    let r = cfg.ratio();
    let n = cfg.fine_count;
    let tiled = tape.reshape(centers, &[b, cfg.coarse_count, 1, 3])?;
    let tiled = tape.tile(tiled, 2, r)?;
    let tiled = tape.reshape(tiled, &[b, n, 3])?;

    let grid = folding_grid::<T>(r, cfg.grid_extent)?;
    let grid: Vec<T> = (0..b * cfg.coarse_count)
        .flat_map(|_| grid.data().iter().copied())
        .collect();
    let grid = tape.constant(Tensor::new(&[b, n, 2], grid)?);

    let global = tape.reshape(f2, &[b, 1, cfg.d2])?;
    let global = tape.tile(global, 1, n)?;
    let f3 = tape.concat(&[tiled, grid, global], 2)?;
    let offsets = mlp(tape, dec, "decoder.fine", f3, &cfg.fine_mlp)?;
    let points = tape.add(tiled, offsets)?;
    Ok(FineOutput { points, centers, f3 })
}

/// Critic MLP on `[b, d1 + d2]` features.
pub fn critic_embed<T: Real>(
    tape: &mut Tape<T>,
    critic: &Bound,
    cfg: &NetConfig,
    head: CriticHead,
    feat: Var,
) -> Result<Var> {
    let s = tape.shape(feat).to_vec();
    if s.len() != 2 || s[1] != cfg.critic_input() {
        return Err(Error::config(format!(
            "critic expects [b, {}], got {s:?}",
            cfg.critic_input()
        )));
    }
    mlp(tape, critic, "critic", feat, &cfg.critic_layers(head))
}

/// A differentiable critic whose input Jacobian can itself be built on the
/// tape, so penalties on it can be differentiated again.
pub trait Critic<T: Real> {
    /// `[b, in]` → `[b, e]`.
    fn embed(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;

    /// `[b, e, in]` Jacobian of the embedding with respect to its input,
    /// recorded with ordinary differentiable ops.
    fn input_jacobian(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// The MLP critic bound on a tape.
pub struct MlpCritic<'a> {
    pub bound: &'a Bound,
    pub cfg: &'a NetConfig,
    pub head: CriticHead,
}

impl<T: Real> Critic<T> for MlpCritic<'_> {
    fn embed(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        critic_embed(tape, self.bound, self.cfg, self.head, x)
    }

    fn input_jacobian(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let widths = self.cfg.critic_layers(self.head);
        let b = tape.shape(x)[0];
        // forward pass keeping pre-activations for the relu masks
        let mut pre = Vec::with_capacity(widths.len());
        let mut h = x;
        for (i, &w) in widths.iter().enumerate() {
            let z = dense(tape, self.bound, &format!("critic.{i}"), h, w)?;
            pre.push(z);
            if i + 1 < widths.len() {
                h = tape.relu(z);
            }
        }
        // J = W_Lᵀ · diag(m_{L-1}) · W_{L-1}ᵀ ⋯ diag(m_0) · W_0ᵀ, built from
        // the output side so every factor is [.., e, width].
        let last = widths.len() - 1;
        let w_last = self.bound.get(&format!("critic.{last}.weight"))?;
        let mut jac = tape.transpose(w_last)?;
        let e = widths[last];
        let width = tape.shape(jac)[1];
        jac = tape.expand(jac, &[b, e, width])?;
        for i in (0..last).rev() {
            let mask = tape.relu_mask(pre[i]);
            let mask = tape.reshape(mask, &[b, 1, widths[i]])?;
            jac = tape.mul(jac, mask)?;
            let w = self.bound.get(&format!("critic.{i}.weight"))?;
            let wt = tape.transpose(w)?;
            jac = tape.matmul(jac, wt)?;
        }
        Ok(jac)
    }
}

/// Everything an auto-encoder forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct AutoencoderOutput {
    pub latent: LatentPair,
    pub coarse: Var,
    pub fine: FineOutput,
}

/// Encodes the complete cloud and decodes it with the complete cloud also
/// standing in as the fine stage's partial input.
pub fn autoencoder_forward<T: Real>(
    tape: &mut Tape<T>,
    enc: &Bound,
    dec: &Bound,
    cfg: &NetConfig,
    y: &Tensor<T>,
    start: FpsStart,
) -> Result<AutoencoderOutput> {
    let x = tape.constant(y.clone());
    let latent = encode(tape, enc, cfg, x)?;
    let coarse = decode_coarse(tape, dec, cfg, latent.f2)?;
    let fine = decode_fine(tape, dec, cfg, latent.f2, coarse, y, start)?;
    Ok(AutoencoderOutput {
        latent,
        coarse,
        fine,
    })
}

/// Completes a batch of partial clouds with the completion encoder and the
/// decoder. Returns `(coarse, fine)` clouds per sample.
pub fn complete<T: Real>(
    params: &ModelParams<T>,
    cfg: &NetConfig,
    partial: &[&PointCloud],
) -> Result<Vec<(PointCloud, PointCloud)>> {
    let input = PointCloud::batch_tensor::<T>(partial)?;
    let mut tape = Tape::new();
    let enc = Bound::new(&mut tape, &params.encoder, false)?;
    let dec = Bound::new(&mut tape, &params.decoder, false)?;
    let x = tape.constant(input.clone());
    let latent = encode(&mut tape, &enc, cfg, x)?;
    let coarse = decode_coarse(&mut tape, &dec, cfg, latent.f2)?;
    let fine = decode_fine(&mut tape, &dec, cfg, latent.f2, coarse, &input, FpsStart::First)?;
    let coarse = PointCloud::unbatch(tape.value(coarse))?;
    let fine = PointCloud::unbatch(tape.value(fine.points))?;
    Ok(coarse.into_iter().zip(fine).collect())
}
