//! Model variants, the presence/absence forward passes, the alternating
//! discriminator/generator update and segmentation inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use segtrans_autograd::{Amsgrad, AmsgradConfig, Float, Gradients, Graph, ParamStore, Tensor, Var};

use crate::arch::Architecture;
use crate::error::{Error, Result};
use crate::losses::{
    dice_loss, hinge_discriminator_loss, l1_loss, total_generator_loss, weighted_total, GeneratorTerms, LossReport, LossWeights,
};
use crate::networks::{decode_residual, decode_segmentation, Decoder, Discriminator, Encoder, LatentPair, SegHead, SkipStack};
use crate::nn::Net;

pub const STORE_ENCODER: u32 = 0;
pub const STORE_COMMON: u32 = 1;
pub const STORE_RESIDUAL: u32 = 2;
pub const STORE_SEG_HEAD: u32 = 3;
pub const STORE_DISC_A: u32 = 4;
pub const STORE_DISC_P: u32 = 5;
pub const STORE_SEG_DECODER: u32 = 6;
pub const STORE_RECON: u32 = 7;

/// Keeps the unique-code stream distinct from weight initialization under the same seed.
const SAMPLER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Proposed,
    AeBaseline,
    SegOnly,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::AeBaseline => "ae_baseline",
            Self::SegOnly => "seg_only",
        }
    }

    pub fn default_weights(self) -> LossWeights {
        match self {
            Self::Proposed => LossWeights::default(),
            Self::AeBaseline => LossWeights::ae_baseline(),
            Self::SegOnly => LossWeights::seg_only(),
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Self::Proposed),
            "ae_baseline" => Ok(Self::AeBaseline),
            "seg_only" => Ok(Self::SegOnly),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// I.i.d. standard-normal unique code of the given shape.
pub fn sample_unique<F: Float>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Everything computed from one presence batch.
#[derive(Clone, Debug)]
pub struct PresenceBundle {
    pub x_p: Var,
    pub common_p: Var,
    pub unique_p: Var,
    pub skips: SkipStack,
    pub x_pa: Var,
    pub delta_pa: Var,
    pub x_pp: Var,
    /// Segmentation of the rows listed in `seg_rows`.
    pub y_seg: Option<Var>,
    pub seg_rows: Vec<usize>,
    pub common_pa: Var,
    pub common_pp: Var,
    pub unique_pp: Var,
}

/// Everything computed from one absence batch.
#[derive(Clone, Debug)]
pub struct AbsenceBundle {
    pub x_a: Var,
    pub common_a: Var,
    pub unique_a: Var,
    pub skips: SkipStack,
    pub x_aa: Var,
    pub u_sampled: Var,
    pub delta_ap: Var,
    pub x_ap: Var,
    pub x_apa: Option<Var>,
    pub common_aa: Var,
    pub common_ap: Var,
    pub unique_ap: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8, lr_generator: 1e-4, lr_discriminator: 1e-3, weight_decay: 1e-4 }
    }
}

impl OptimizerConfig {
    pub fn generator(&self) -> AmsgradConfig {
        AmsgradConfig { lr: self.lr_generator, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn discriminator(&self) -> AmsgradConfig {
        AmsgradConfig { lr: self.lr_discriminator, ..self.generator() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr_generator > 0.0
            && self.lr_discriminator > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// One of the three compared models. Every variant shares the encoder;
/// the proposed model adds the translation decoders and discriminators,
/// the baselines a plain segmentation decoder (and, for the autoencoding
/// baseline, a reconstruction decoder without long skips).
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub variant: VariantKind,
    pub arch: Architecture,
    pub encoder: Encoder<F>,
    pub common: Option<Decoder<F>>,
    pub residual: Option<Decoder<F>>,
    pub seg_head: Option<SegHead<F>>,
    pub disc_a: Option<Discriminator<F>>,
    pub disc_p: Option<Discriminator<F>>,
    pub seg_decoder: Option<Decoder<F>>,
    pub recon: Option<Decoder<F>>,
}

impl<F: Float> Model<F> {
    /// Fresh weights drawn from `seed`. Spectral normalization is applied
    /// to every network of the proposed model only.
    pub fn new(variant: VariantKind, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sn = variant == VariantKind::Proposed;
        let encoder = Encoder::new(&arch, STORE_ENCODER, sn, &mut rng)?;
        let (ic, lc, cc) = (arch.image_channels, arch.latent_channels, arch.common_channels());
        let mut model = Self {
            variant,
            encoder,
            common: None,
            residual: None,
            seg_head: None,
            disc_a: None,
            disc_p: None,
            seg_decoder: None,
            recon: None,
            arch: arch.clone(),
        };
        match variant {
            VariantKind::Proposed => {
                let common = Decoder::new(&arch, &arch.common_decoder, "common", STORE_COMMON, cc, ic, true, sn, &mut rng)?;
                let residual = Decoder::new(&arch, &arch.residual_decoder, "residual", STORE_RESIDUAL, lc, ic, true, sn, &mut rng)?;
                let head = SegHead::new(&arch, &residual, STORE_SEG_HEAD, sn, &mut rng);
                model.disc_a = Some(Discriminator::new(&arch, "disc_a", STORE_DISC_A, sn, &mut rng));
                model.disc_p = Some(Discriminator::new(&arch, "disc_p", STORE_DISC_P, sn, &mut rng));
                model.common = Some(common);
                model.residual = Some(residual);
                model.seg_head = Some(head);
            }
            VariantKind::AeBaseline | VariantKind::SegOnly => {
                let classes = arch.classes;
                model.seg_decoder =
                    Some(Decoder::new(&arch, &arch.common_decoder, "seg_decoder", STORE_SEG_DECODER, lc, classes, true, false, &mut rng)?);
                if variant == VariantKind::AeBaseline {
                    model.recon = Some(Decoder::new(&arch, &arch.common_decoder, "recon", STORE_RECON, lc, ic, false, false, &mut rng)?);
                }
            }
        }
        Ok(model)
    }

    fn missing(&self, what: &'static str) -> Error {
        Error::Variant { variant: self.variant.name(), what }
    }

    /// Generator-side networks in a fixed order.
    pub fn generator_nets(&self) -> Vec<&Net<F>> {
        let mut out = vec![&self.encoder.net];
        for d in [&self.common, &self.residual, &self.seg_decoder, &self.recon].into_iter().flatten() {
            out.push(&d.net);
        }
        if let Some(h) = &self.seg_head {
            out.push(&h.net);
        }
        out
    }

    pub fn generator_nets_mut(&mut self) -> Vec<&mut Net<F>> {
        let mut out = vec![&mut self.encoder.net];
        for d in [&mut self.common, &mut self.residual, &mut self.seg_decoder, &mut self.recon].into_iter().flatten() {
            out.push(&mut d.net);
        }
        if let Some(h) = &mut self.seg_head {
            out.push(&mut h.net);
        }
        out
    }

    pub fn discriminator_nets(&self) -> Vec<&Net<F>> {
        [&self.disc_a, &self.disc_p].into_iter().flatten().map(|d| &d.net).collect()
    }

    pub fn discriminator_nets_mut(&mut self) -> Vec<&mut Net<F>> {
        [&mut self.disc_a, &mut self.disc_p].into_iter().flatten().map(|d| &mut d.net).collect()
    }

    pub fn nets(&self) -> Vec<&Net<F>> {
        let mut out = self.generator_nets();
        out.extend(self.discriminator_nets());
        out
    }

    pub fn nets_mut(&mut self) -> Vec<&mut Net<F>> {
        let Self { encoder, common, residual, seg_head, disc_a, disc_p, seg_decoder, recon, .. } = self;
        let mut out = vec![&mut encoder.net];
        for d in [common, residual, seg_decoder, recon].into_iter().flatten() {
            out.push(&mut d.net);
        }
        if let Some(h) = seg_head {
            out.push(&mut h.net);
        }
        for d in [disc_a, disc_p].into_iter().flatten() {
            out.push(&mut d.net);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|n| n.store.num_params()).sum()
    }

    /// Hash of the trainable generator-side weights.
    pub fn generator_checksum(&self) -> u64 {
        combine(self.generator_nets().iter().map(|n| n.store.param_checksum()))
    }

    /// Hash of the trainable discriminator weights.
    pub fn discriminator_checksum(&self) -> u64 {
        combine(self.discriminator_nets().iter().map(|n| n.store.param_checksum()))
    }

    pub fn advance_spectral(&mut self, n_iters: usize) {
        for net in self.nets_mut() {
            net.advance_spectral(n_iters);
        }
    }

    pub fn encode(&self, g: &mut Graph<F>, x: Var) -> Result<(LatentPair, SkipStack)> {
        self.encoder.encode(g, x)
    }

    /// Presence pass: translation to the absence domain, residual,
    /// reconstruction, re-encodings and, for `seg_rows`, segmentation.
    pub fn forward_presence(&self, g: &mut Graph<F>, x_p: Var, seg_rows: &[usize]) -> Result<PresenceBundle> {
        let common = self.common.as_ref().ok_or_else(|| self.missing("common decoder"))?;
        let residual = self.residual.as_ref().ok_or_else(|| self.missing("residual decoder"))?;
        let (lat, skips) = self.encode(g, x_p)?;
        let x_pa = common.decode(g, lat.common, Some(&skips))?;
        let delta_pa = decode_residual(g, residual, lat.common, lat.unique, &skips)?;
        let x_pp = g.add(x_pa, delta_pa)?;
        let y_seg = if seg_rows.is_empty() { None } else { Some(self.segment_rows(g, &lat, &skips, seg_rows)?) };
        let (lat_pa, _) = self.encode(g, x_pa)?;
        let (lat_pp, _) = self.encode(g, x_pp)?;
        Ok(PresenceBundle {
            x_p,
            common_p: lat.common,
            unique_p: lat.unique,
            skips,
            x_pa,
            delta_pa,
            x_pp,
            y_seg,
            seg_rows: seg_rows.to_vec(),
            common_pa: lat_pa.common,
            common_pp: lat_pp.common,
            unique_pp: lat_pp.unique,
        })
    }

    /// Absence pass: reconstruction, translation to the presence domain
    /// with a sampled unique code, re-encodings and the optional cycle back.
    pub fn forward_absence(&self, g: &mut Graph<F>, x_a: Var, u_sampled: Tensor<F>, cycle: bool) -> Result<AbsenceBundle> {
        let common = self.common.as_ref().ok_or_else(|| self.missing("common decoder"))?;
        let residual = self.residual.as_ref().ok_or_else(|| self.missing("residual decoder"))?;
        let (lat, skips) = self.encode(g, x_a)?;
        if u_sampled.shape() != g.shape(lat.unique) {
            return Err(Error::Input(format!(
                "sampled unique code {:?} does not match the encoder's {:?}",
                u_sampled.shape(),
                g.shape(lat.unique)
            )));
        }
        let u = g.constant(u_sampled);
        let x_aa = common.decode(g, lat.common, Some(&skips))?;
        let delta_ap = decode_residual(g, residual, lat.common, u, &skips)?;
        let x_ap = g.add(x_aa, delta_ap)?;
        let (lat_aa, _) = self.encode(g, x_aa)?;
        let (lat_ap, skips_ap) = self.encode(g, x_ap)?;
        let x_apa = if cycle { Some(common.decode(g, lat_ap.common, Some(&skips_ap))?) } else { None };
        Ok(AbsenceBundle {
            x_a,
            common_a: lat.common,
            unique_a: lat.unique,
            skips,
            x_aa,
            u_sampled: u,
            delta_ap,
            x_ap,
            x_apa,
            common_aa: lat_aa.common,
            common_ap: lat_ap.common,
            unique_ap: lat_ap.unique,
        })
    }

    fn segment_rows(&self, g: &mut Graph<F>, lat: &LatentPair, skips: &SkipStack, rows: &[usize]) -> Result<Var> {
        let n = g.shape(lat.raw)[0];
        let (lat, skips) = if rows.len() == n && rows.iter().enumerate().all(|(i, &r)| i == r) {
            (*lat, skips.clone())
        } else {
            let sel = LatentPair {
                common: g.select_batch(lat.common, rows)?,
                unique: g.select_batch(lat.unique, rows)?,
                raw: g.select_batch(lat.raw, rows)?,
            };
            let levels = skips.levels.iter().map(|&s| g.select_batch(s, rows)).collect::<std::result::Result<Vec<_>, _>>()?;
            (sel, SkipStack { levels })
        };
        match self.variant {
            VariantKind::Proposed => {
                let residual = self.residual.as_ref().ok_or_else(|| self.missing("residual decoder"))?;
                let head = self.seg_head.as_ref().ok_or_else(|| self.missing("segmentation head"))?;
                decode_segmentation(g, residual, head, lat.common, lat.unique, &skips)
            }
            VariantKind::AeBaseline | VariantKind::SegOnly => {
                let dec = self.seg_decoder.as_ref().ok_or_else(|| self.missing("segmentation decoder"))?;
                let logits = dec.decode(g, lat.raw, Some(&skips))?;
                Ok(g.sigmoid(logits))
            }
        }
    }

    /// Target probabilities for every row of `x`.
    pub fn predict(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (lat, skips) = self.encode(g, x)?;
        let n = g.shape(x)[0];
        let rows: Vec<usize> = (0..n).collect();
        self.segment_rows(g, &lat, &skips, &rows)
    }

    pub fn predict_tensor(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.predict(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// Binary mask `(n, 1, h, w)`: 1 where the probability is ≥ `threshold`.
    pub fn segment(&self, x: &Tensor<F>, threshold: f64) -> Result<Tensor<F>> {
        let t = F::lit(threshold);
        Ok(self.predict_tensor(x)?.map(|p| if p >= t { F::one() } else { F::zero() }))
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        let (h, w) = *self.arch.level_sizes().last().expect("nonempty");
        [batch, self.arch.unique_channels, h, w]
    }
}

fn combine(parts: impl Iterator<Item = u64>) -> u64 {
    parts.fold(0xcbf29ce484222325, |h, x| (h ^ x).wrapping_mul(0x100000001b3).rotate_left(17))
}

/// Masks for the labeled rows of a presence batch, in the order of `rows`.
#[derive(Clone, Debug)]
pub struct LabeledBatch<F> {
    pub rows: Vec<usize>,
    pub masks: Tensor<F>,
}

impl<F: Float> LabeledBatch<F> {
    pub fn none() -> Self {
        Self { rows: Vec::new(), masks: Tensor::zeros(&[0]) }
    }

    fn validate(&self, batch: usize, h: usize, w: usize) -> Result<()> {
        if self.rows.is_empty() {
            return Ok(());
        }
        if self.masks.shape() != [self.rows.len(), 1, h, w] {
            return Err(Error::Input(format!("{} labeled rows but masks of shape {:?}", self.rows.len(), self.masks.shape())));
        }
        if let Some(&r) = self.rows.iter().find(|&&r| r >= batch) {
            return Err(Error::Input(format!("labeled row {r} outside a batch of {batch}")));
        }
        Ok(())
    }
}

/// Losses and bookkeeping of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub n_labeled: usize,
    pub losses: LossReport,
}

/// Model plus the state needed to keep training it.
#[derive(Clone, Debug)]
pub struct Trainer<F> {
    pub model: Model<F>,
    pub weights: LossWeights,
    pub opt_generator: Amsgrad<F>,
    pub opt_discriminator: Amsgrad<F>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl<F: Float> Trainer<F> {
    pub fn new(model: Model<F>, weights: LossWeights, optim: OptimizerConfig, seed: u64) -> Result<Self> {
        weights.validate()?;
        optim.validate()?;
        Ok(Self {
            model,
            weights,
            opt_generator: Amsgrad::new(optim.generator()),
            opt_discriminator: Amsgrad::new(optim.discriminator()),
            rng: ChaCha8Rng::seed_from_u64(seed ^ SAMPLER_SALT),
            step: 0,
        })
    }

    /// One update. For the proposed model: advance spectral normalization,
    /// update both discriminators on translations from the current
    /// generator, then update the generator on a fresh forward pass.
    pub fn training_step(&mut self, x_p: &Tensor<F>, x_a: &Tensor<F>, labeled: &LabeledBatch<F>) -> Result<StepReport> {
        let (n, _, h, w) = x_p.dims4()?;
        labeled.validate(n, h, w)?;
        let losses = match self.model.variant {
            VariantKind::Proposed => self.proposed_step(x_p, x_a, labeled)?,
            VariantKind::AeBaseline | VariantKind::SegOnly => self.baseline_step(x_p, x_a, labeled)?,
        };
        self.step += 1;
        Ok(StepReport { step: self.step, n_labeled: labeled.rows.len(), losses })
    }

    fn non_finite(&self, what: &'static str, report: &LossReport) -> Error {
        Error::NonFinite { what, step: self.step, report: format!("{report:?}") }
    }

    fn proposed_step(&mut self, x_p: &Tensor<F>, x_a: &Tensor<F>, labeled: &LabeledBatch<F>) -> Result<LossReport> {
        self.model.advance_spectral(1);
        let shape = self.model.latent_shape(x_a.dim(0));
        let u = sample_unique::<F>(&shape, &mut self.rng);

        let (loss_d, grads_d) = {
            let m = &self.model;
            let (d_a, d_p) = (m.disc_a.as_ref().expect("proposed"), m.disc_p.as_ref().expect("proposed"));
            let mut g = Graph::new();
            g.train(&d_a.net.store);
            g.train(&d_p.net.store);
            let xp = g.constant(x_p.clone());
            let xa = g.constant(x_a.clone());
            let common = m.common.as_ref().expect("proposed");
            let residual = m.residual.as_ref().expect("proposed");
            let (lat_p, skips_p) = m.encode(&mut g, xp)?;
            let x_pa = common.decode(&mut g, lat_p.common, Some(&skips_p))?;
            let (lat_a, skips_a) = m.encode(&mut g, xa)?;
            let x_aa = common.decode(&mut g, lat_a.common, Some(&skips_a))?;
            let uv = g.constant(u.clone());
            let delta = decode_residual(&mut g, residual, lat_a.common, uv, &skips_a)?;
            let x_ap = g.add(x_aa, delta)?;
            let (x_pa, x_ap) = (g.detach(x_pa), g.detach(x_ap));
            let real_a = d_a.discriminate(&mut g, xa)?;
            let fake_a = d_a.discriminate(&mut g, x_pa)?;
            let real_p = d_p.discriminate(&mut g, xp)?;
            let fake_p = d_p.discriminate(&mut g, x_ap)?;
            let la = hinge_discriminator_loss(&mut g, real_a, fake_a)?;
            let lp = hinge_discriminator_loss(&mut g, real_p, fake_p)?;
            let loss = g.add(la, lp)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(self.non_finite("discriminator loss", &LossReport { adv_d: value, ..LossReport::default() }));
            }
            (value, g.backward(loss)?.into_params())
        };
        if !grads_d.all_finite() {
            return Err(self.non_finite("discriminator gradient", &LossReport { adv_d: loss_d, ..LossReport::default() }));
        }
        {
            let mut stores: Vec<&mut ParamStore<F>> = self.model.discriminator_nets_mut().into_iter().map(|n| &mut n.store).collect();
            self.opt_discriminator.step(&mut stores, &grads_d)?;
        }

        let (mut report, grads_g) = {
            let m = &self.model;
            let mut g = Graph::new();
            for net in m.generator_nets() {
                g.train(&net.store);
            }
            let xp = g.constant(x_p.clone());
            let xa = g.constant(x_a.clone());
            let p = m.forward_presence(&mut g, xp, &labeled.rows)?;
            let a = m.forward_absence(&mut g, xa, u, self.weights.cycle_enabled)?;
            let scores = if self.weights.adv != 0.0 {
                let s_pa = m.disc_a.as_ref().expect("proposed").discriminate(&mut g, p.x_pa)?;
                let s_ap = m.disc_p.as_ref().expect("proposed").discriminate(&mut g, a.x_ap)?;
                Some((s_pa, s_ap))
            } else {
                None
            };
            let target = (!labeled.rows.is_empty()).then(|| g.constant(labeled.masks.clone()));
            let (total, report) = total_generator_loss(&mut g, &p, &a, scores, target, &self.weights)?;
            self.check_generator(&g, total, report)?
        };
        report.adv_d = loss_d;
        self.apply_generator(&grads_g)?;
        Ok(report)
    }

    fn baseline_step(&mut self, x_p: &Tensor<F>, x_a: &Tensor<F>, labeled: &LabeledBatch<F>) -> Result<LossReport> {
        let (report, grads) = {
            let m = &self.model;
            let mut g = Graph::new();
            for net in m.generator_nets() {
                g.train(&net.store);
            }
            let mut terms = GeneratorTerms::default();
            let needs_rec = m.variant == VariantKind::AeBaseline && self.weights.rec != 0.0;
            if needs_rec {
                let recon = m.recon.as_ref().ok_or_else(|| m.missing("reconstruction decoder"))?;
                let xp = g.constant(x_p.clone());
                let xa = g.constant(x_a.clone());
                let (lat_p, skips_p) = m.encode(&mut g, xp)?;
                let (lat_a, _) = m.encode(&mut g, xa)?;
                let rp = recon.decode(&mut g, lat_p.raw, None)?;
                let ra = recon.decode(&mut g, lat_a.raw, None)?;
                let lp = l1_loss(&mut g, xp, rp)?;
                let la = l1_loss(&mut g, xa, ra)?;
                terms.rec = Some(g.add(lp, la)?);
                if !labeled.rows.is_empty() {
                    let y = m.segment_rows(&mut g, &lat_p, &skips_p, &labeled.rows)?;
                    let t = g.constant(labeled.masks.clone());
                    terms.seg = Some(dice_loss(&mut g, y, t)?);
                }
            } else if !labeled.rows.is_empty() && self.weights.seg != 0.0 {
                let xs = g.constant(x_p.select_batch(&labeled.rows)?);
                let y = m.predict(&mut g, xs)?;
                let t = g.constant(labeled.masks.clone());
                terms.seg = Some(dice_loss(&mut g, y, t)?);
            }
            let (total, report) = weighted_total(&mut g, &terms, &self.weights)?;
            self.check_generator(&g, total, report)?
        };
        self.apply_generator(&grads)?;
        Ok(report)
    }

    fn check_generator(&self, g: &Graph<F>, total: Var, report: LossReport) -> Result<(LossReport, Gradients<F>)> {
        if !report.all_finite() {
            return Err(self.non_finite("generator loss", &report));
        }
        let grads = g.backward(total)?.into_params();
        if !grads.all_finite() {
            return Err(self.non_finite("generator gradient", &report));
        }
        Ok((report, grads))
    }

    fn apply_generator(&mut self, grads: &Gradients<F>) -> Result<()> {
        let mut stores: Vec<&mut ParamStore<F>> = self.model.generator_nets_mut().into_iter().map(|n| &mut n.store).collect();
        self.opt_generator.step(&mut stores, grads)?;
        Ok(())
    }
}
