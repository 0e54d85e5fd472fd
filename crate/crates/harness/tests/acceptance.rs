//! Acceptance checks, one line per criterion.
//!
//! Run all with `cargo test --test acceptance`, or a subset with
//! `cargo test --test acceptance -- C2 C4`. Criteria that need multi-hour
//! training runs are reported as NOT RUN.
//!
//! The run is a report: a FAIL line does not fail the test target unless
//! `SEGTRANS_ACCEPTANCE_STRICT` is set.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segtrans_autograd::{EntryKind, Graph, ParamKey, Tensor, Var};
use segtrans_core::losses::{
    cycle_loss, dice_loss, hinge_discriminator_loss, hinge_generator_loss, l1_loss, latent_loss, reconstruction_loss,
    total_generator_loss, DICE_EPS,
};
use segtrans_core::networks::{decode_residual, decode_segmentation};
use segtrans_core::nn::{power_iterate, SpectralState};
use segtrans_core::{
    sample_unique, AbsenceBundle, Architecture, LabeledBatch, LossWeights, Model, OptimizerConfig, PresenceBundle,
    SkipStack, Trainer, VariantKind,
};
use segtrans_data::{
    augment, clutter::render_example, generate_cluttered_mnist, AugmentConfig, AugmentParams, ClutterPreset, ClutterSpec,
    DatasetManifest, DigitFolds, Domain, Fold, Image,
};
use segtrans_harness::evaluate::{DiceAccumulator, Overlap};
use segtrans_harness::loader::{load_batch, stack, Dataset};
use segtrans_harness::{load_checkpoint, residual_localization, ExperimentConfig, RunReport};

enum Outcome {
    Done { passed: bool, detail: String },
    NotRun(String),
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome::Done { passed, detail }
}

type Check = fn() -> Outcome;

fn main() {
    let selected: BTreeSet<String> = std::env::args().skip(1).filter(|a| a.starts_with('C')).collect();
    let skipped: BTreeSet<String> = std::env::var("SEGTRANS_ACCEPTANCE_SKIP")
        .unwrap_or_default()
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let checks: [(&str, &str, Check); 10] = [
        ("C1", "loss oracles", loss_oracles),
        ("C2", "gradient check", gradient_check),
        ("C3", "structural identities", structural_identities),
        ("C4", "spectral normalization", spectral_norm),
        ("C5", "dataset suite", dataset_suite),
        ("C6", "augmentation suite", augmentation_suite),
        ("C7", "overfit smoke", overfit_smoke),
        ("C8", "desk-scale ordering", desk_ordering),
        ("C9", "residual localizes the target", residual_localizes),
        ("C10", "full-scale protocol", full_scale),
    ];
    let (mut passed_n, mut failed, mut not_run) = (0, 0, 0);
    for (id, name, check) in checks {
        if !selected.is_empty() && !selected.contains(id) {
            continue;
        }
        let started = Instant::now();
        let o = if skipped.contains(id) { Outcome::NotRun("skipped by SEGTRANS_ACCEPTANCE_SKIP".into()) } else { check() };
        let secs = started.elapsed().as_secs_f64();
        match o {
            Outcome::Done { passed, detail } => {
                println!("{id:<4} {}  {name}: {detail} [{secs:.1}s]", if passed { "PASS   " } else { "FAIL   " });
                passed_n += usize::from(passed);
                failed += usize::from(!passed);
            }
            Outcome::NotRun(why) => {
                println!("{id:<4} NOT RUN  {name}: {why}");
                not_run += 1;
            }
        }
    }
    println!("acceptance: {passed_n} passed, {failed} failed, {not_run} not run");
    if failed > 0 && std::env::var_os("SEGTRANS_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7)]
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// Tensors for a pair of bundles; the oracle works on these directly.
struct BundleData {
    image: Vec<usize>,
    t: Vec<Tensor<f64>>,
}

// Index of each tensor inside `BundleData::t`.
const X_P: usize = 0;
const X_PP: usize = 1;
const X_PA: usize = 2;
const DELTA_PA: usize = 3;
const C_P: usize = 4;
const U_P: usize = 5;
const C_PA: usize = 6;
const C_PP: usize = 7;
const U_PP: usize = 8;
const X_A: usize = 9;
const X_AA: usize = 10;
const X_AP: usize = 11;
const X_APA: usize = 12;
const C_A: usize = 13;
const U_A: usize = 14;
const C_AA: usize = 15;
const C_AP: usize = 16;
const U_S: usize = 17;
const U_AP: usize = 18;
const DELTA_AP: usize = 19;

impl BundleData {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let (n, h, w) = (rng.random_range(1..4), rng.random_range(2..7), rng.random_range(2..7));
        let image = vec![n, 1, h, w];
        let code_c = vec![n, rng.random_range(1..4), 2, 2];
        let code_u = vec![n, rng.random_range(1..3), 2, 2];
        let shapes = [
            &image, &image, &image, &image, &code_c, &code_u, &code_c, &code_c, &code_u, &image, &image, &image, &image,
            &code_c, &code_u, &code_c, &code_c, &code_u, &code_u, &image,
        ];
        let t = shapes.iter().map(|s| uniform(rng, s, -2.0, 2.0)).collect();
        Self { image, t }
    }

    fn d(&self, i: usize) -> &[f64] {
        self.t[i].data()
    }

    fn bundles(&self, g: &mut Graph<f64>, seg: Option<Var>) -> (PresenceBundle, AbsenceBundle) {
        let v: Vec<Var> = self.t.iter().map(|t| g.constant(t.clone())).collect();
        let p = PresenceBundle {
            x_p: v[X_P],
            common_p: v[C_P],
            unique_p: v[U_P],
            skips: SkipStack { levels: vec![] },
            x_pa: v[X_PA],
            delta_pa: v[DELTA_PA],
            x_pp: v[X_PP],
            y_seg: seg,
            seg_rows: vec![],
            common_pa: v[C_PA],
            common_pp: v[C_PP],
            unique_pp: v[U_PP],
        };
        let a = AbsenceBundle {
            x_a: v[X_A],
            common_a: v[C_A],
            unique_a: v[U_A],
            skips: SkipStack { levels: vec![] },
            x_aa: v[X_AA],
            u_sampled: v[U_S],
            delta_ap: v[DELTA_AP],
            x_ap: v[X_AP],
            x_apa: Some(v[X_APA]),
            common_aa: v[C_AA],
            common_ap: v[C_AP],
            unique_ap: v[U_AP],
        };
        (p, a)
    }

    fn oracle_rec(&self) -> f64 {
        mean_abs_diff(self.d(X_P), self.d(X_PP)) + mean_abs_diff(self.d(X_A), self.d(X_AA))
    }

    fn oracle_lat(&self) -> f64 {
        [(C_P, C_PA), (C_A, C_AP), (C_A, C_AA), (C_P, C_PP), (U_P, U_PP), (U_S, U_AP)]
            .iter()
            .map(|&(a, b)| mean_abs_diff(self.d(a), self.d(b)))
            .sum()
    }

    fn oracle_cyc(&self) -> f64 {
        mean_abs_diff(self.d(X_A), self.d(X_APA))
    }
}

fn oracle_dice(p: &[f64], t: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let (sp, st): (f64, f64) = (p.iter().sum(), t.iter().sum());
    1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
}

fn oracle_hinge_d(real: &[f64], fake: &[f64]) -> f64 {
    mean(&real.iter().map(|r| (1.0 - r).max(0.0)).collect::<Vec<_>>())
        + mean(&fake.iter().map(|f| (1.0 + f).max(0.0)).collect::<Vec<_>>())
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn loss_oracles() -> Outcome {
    const CASES: usize = 60;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for case in 0..CASES {
        let shape = random_shape(&mut rng);
        let mut g = Graph::new();

        // Soft predictions against binary targets; every tenth case has an empty target.
        let pred = uniform(&mut rng, &shape, 0.0, 1.0);
        let target = Tensor::from_fn(&shape, |_| if case % 10 != 0 && rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let (pv, tv) = (g.constant(pred.clone()), g.constant(target.clone()));
        let d = dice_loss(&mut g, pv, tv).unwrap();
        record("dice", rel_err(scalar(&g, d), oracle_dice(pred.data(), target.data())));

        let a = uniform(&mut rng, &shape, -3.0, 3.0);
        let b = uniform(&mut rng, &shape, -3.0, 3.0);
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = l1_loss(&mut g, av, bv).unwrap();
        record("l1", rel_err(scalar(&g, l), mean_abs_diff(a.data(), b.data())));

        let real = uniform(&mut rng, &[shape[0], 1, shape[2], shape[3]], -2.5, 2.5);
        let fake = uniform(&mut rng, &[shape[0], 1, shape[2], shape[3]], -2.5, 2.5);
        let (rv, fv) = (g.constant(real.clone()), g.constant(fake.clone()));
        let hd = hinge_discriminator_loss(&mut g, rv, fv).unwrap();
        record("hinge_d", rel_err(scalar(&g, hd), oracle_hinge_d(real.data(), fake.data())));
        let hg = hinge_generator_loss(&mut g, fv);
        record("hinge_g", rel_err(scalar(&g, hg), -mean(fake.data())));

        let data = BundleData::random(&mut rng);
        let labeled = rng.random_bool(0.7);
        let seg_pred = uniform(&mut rng, &data.image, 0.0, 1.0);
        let seg_mask = Tensor::from_fn(&data.image, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let seg_var = labeled.then(|| g.constant(seg_pred.clone()));
        let (p, a) = data.bundles(&mut g, seg_var);
        let rec = reconstruction_loss(&mut g, &p, &a).unwrap();
        record("reconstruction", rel_err(scalar(&g, rec), data.oracle_rec()));
        let lat = latent_loss(&mut g, &p, &a).unwrap();
        record("latent", rel_err(scalar(&g, lat), data.oracle_lat()));
        let cyc = cycle_loss(&mut g, &a, true).unwrap().unwrap();
        record("cycle", rel_err(scalar(&g, cyc), data.oracle_cyc()));

        let weights = LossWeights {
            adv: rng.random_range(0.0..5.0),
            rec: rng.random_range(0.0..60.0),
            lat: rng.random_range(0.0..3.0),
            cyc: rng.random_range(0.0..60.0),
            seg: rng.random_range(0.0..2.0),
            cycle_enabled: rng.random_bool(0.5),
        };
        let s_pa = uniform(&mut rng, &[data.image[0], 1, 2, 2], -2.0, 2.0);
        let s_ap = uniform(&mut rng, &[data.image[0], 1, 1, 1], -2.0, 2.0);
        let scores = (g.constant(s_pa.clone()), g.constant(s_ap.clone()));
        let target = labeled.then(|| g.constant(seg_mask.clone()));
        let (total, report) = total_generator_loss(&mut g, &p, &a, Some(scores), target, &weights).unwrap();
        let seg = if labeled { oracle_dice(seg_pred.data(), seg_mask.data()) } else { 0.0 };
        let cyc = if weights.cycle_enabled { data.oracle_cyc() } else { 0.0 };
        let adv = -mean(s_pa.data()) - mean(s_ap.data());
        let expected = weights.seg * seg
            + weights.rec * data.oracle_rec()
            + weights.lat * data.oracle_lat()
            + weights.cyc * cyc
            + weights.adv * adv;
        record("total_generator", rel_err(scalar(&g, total), expected).max(rel_err(report.total, expected)));
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let names: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        max <= 1e-6,
        format!("{} losses x {CASES} cases, max rel err {max:.1e} (tol 1e-6): {}", worst.len(), names.join(", ")),
    )
}

/// Generator objective of a fixed batch for a miniature proposed model.
struct Objective {
    x_p: Tensor<f64>,
    x_a: Tensor<f64>,
    u: Tensor<f64>,
    rows: Vec<usize>,
    masks: Tensor<f64>,
    weights: LossWeights,
}

impl Objective {
    fn value(&self, m: &Model<f64>, train: bool) -> (f64, Option<segtrans_autograd::Gradients<f64>>) {
        let mut g = Graph::new();
        if train {
            for net in m.generator_nets() {
                g.train(&net.store);
            }
        }
        let xp = g.constant(self.x_p.clone());
        let xa = g.constant(self.x_a.clone());
        let p = m.forward_presence(&mut g, xp, &self.rows).unwrap();
        let a = m.forward_absence(&mut g, xa, self.u.clone(), true).unwrap();
        let s_pa = m.disc_a.as_ref().unwrap().discriminate(&mut g, p.x_pa).unwrap();
        let s_ap = m.disc_p.as_ref().unwrap().discriminate(&mut g, a.x_ap).unwrap();
        let t = g.constant(self.masks.clone());
        let (total, _) = total_generator_loss(&mut g, &p, &a, Some((s_pa, s_ap)), Some(t), &self.weights).unwrap();
        let v = scalar(&g, total);
        let grads = train.then(|| g.backward(total).unwrap().into_params());
        (v, grads)
    }
}

/// Central differences are only meaningful where the objective is smooth
/// across `[θ − h, θ + h]`. A ReLU or |·| kink inside that interval shows up
/// as one-sided slopes that disagree beyond roundoff; such coordinates are
/// re-checked with steps of 1e-6 and 1e-7. Gradients smaller than the
/// roundoff floor of the quotient (tolerance-scaled) are compared in
/// absolute terms.
fn gradient_check() -> Outcome {
    const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
    const COORDS: usize = 150;
    const RTOL: f64 = 1e-4;
    let mut model = Model::<f64>::new(VariantKind::Proposed, Architecture::tiny((8, 8), 1), 21).unwrap();
    let n_params = model.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let obj = Objective {
        x_p: uniform(&mut rng, &[2, 1, 8, 8], -1.0, 1.0),
        x_a: uniform(&mut rng, &[2, 1, 8, 8], -1.0, 1.0),
        u: sample_unique(&model.latent_shape(2), &mut rng),
        rows: vec![0, 1],
        masks: Tensor::from_fn(&[2, 1, 8, 8], |i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 }),
        weights: LossWeights::default(),
    };
    let (f0, grads) = obj.value(&model, true);
    let grads = grads.unwrap();
    let noise = |h: f64| 4.0 * f64::EPSILON * f0.abs() / h;
    let floor = noise(STEPS[0]) / RTOL;

    let mut coords = Vec::new();
    for (k, net) in model.generator_nets().iter().enumerate() {
        for (e, entry) in net.store.entries().iter().enumerate() {
            if entry.kind == EntryKind::Param {
                coords.extend((0..entry.tensor.numel()).map(|i| (k, e, i)));
            }
        }
    }
    let n_coords = coords.len();
    let order = rand::seq::index::sample(&mut rng, n_coords, n_coords);
    let eval_at = |model: &mut Model<f64>, (k, e, i): (usize, usize, usize), delta: f64| {
        let orig = model.generator_nets()[k].store.entries()[e].tensor.data()[i];
        model.generator_nets_mut()[k].store.entries_mut()[e].tensor.data_mut()[i] = orig + delta;
        let v = obj.value(model, false).0;
        model.generator_nets_mut()[k].store.entries_mut()[e].tensor.data_mut()[i] = orig;
        v
    };
    // Per step size: coordinates resolved there and their worst relative error.
    let mut resolved = [(0usize, 0.0f64); 3];
    let (mut unresolved, mut tiny, mut worst_tiny, mut sum) = (0, 0, 0.0f64, 0.0);
    for c in order.iter() {
        if resolved[0].0 == COORDS {
            break;
        }
        let (k, e, i) = coords[c];
        let key = ParamKey { store: model.generator_nets()[k].store.id(), index: e as u32 };
        let analytic = grads.get(key).map_or(0.0, |t| t.data()[i]);
        let mut done = false;
        for (level, &h) in STEPS.iter().enumerate() {
            let (fp, fm) = (eval_at(&mut model, coords[c], h), eval_at(&mut model, coords[c], -h));
            let numeric = (fp - fm) / (2.0 * h);
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            if (right - left).abs() > RTOL * right.abs().max(left.abs()) + 2.0 * noise(h) {
                continue;
            }
            if analytic.abs().max(numeric.abs()) < floor {
                // Below what h=1e-5 can resolve relatively: compare against the roundoff at this step.
                tiny += 1;
                worst_tiny = worst_tiny.max((analytic - numeric).abs() / noise(h));
                done = true;
                break;
            }
            let err = rel_err(analytic, numeric);
            resolved[level].0 += 1;
            resolved[level].1 = resolved[level].1.max(err);
            if level == 0 {
                sum += err;
            }
            done = true;
            break;
        }
        unresolved += usize::from(!done);
    }
    let [(n5, e5), (n6, e6), (n7, e7)] = resolved;
    outcome(
        n_params <= 5000 && n5 >= 100 && e5.max(e6).max(e7) < RTOL && worst_tiny < 1.0,
        format!(
            "{n_params} parameters; h=1e-5: {n5} coordinates, max rel err {e5:.1e}, mean {:.1e} (tol 1e-4); \
             kinks within 1e-5 re-checked: {n6} at h=1e-6 (max {e6:.1e}), {n7} at h=1e-7 (max {e7:.1e}), {unresolved} unresolved; \
             {tiny} gradients below the {floor:.0e} resolution floor agree within {worst_tiny:.2} x roundoff",
            sum / n5.max(1) as f64
        ),
    )
}

fn perturb_first(net: &mut segtrans_core::nn::Net<f64>, name_part: &str) -> String {
    let e = net
        .store
        .entries_mut()
        .iter_mut()
        .find(|e| e.kind == EntryKind::Param && e.name.contains(name_part) && e.name.ends_with("weight"))
        .expect("weight entry");
    for v in e.tensor.data_mut() {
        *v *= 1.5;
    }
    e.name.clone()
}

fn structural_identities() -> Outcome {
    let arch = Architecture::tiny((16, 16), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let x = uniform(&mut rng, &[3, 1, 16, 16], -1.0, 1.0);
    let mut notes = Vec::new();
    let mut ok = true;

    let model = Model::<f64>::new(VariantKind::Proposed, arch.clone(), 5).unwrap();
    let outputs = |m: &Model<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (lat, skips) = m.encode(&mut g, xv).unwrap();
        let joined = g.concat(&[lat.common, lat.unique]).unwrap();
        let split_ok = g.value(joined) == g.value(lat.raw);
        let p = m.forward_presence(&mut g, xv, &[0, 1, 2]).unwrap();
        let additive = g.value(p.x_pp).data().iter().zip(g.value(p.x_pa).data()).zip(g.value(p.delta_pa).data()).all(
            |((&pp, &pa), &d)| pp == pa + d,
        );
        let ulps = g
            .value(p.x_pp)
            .data()
            .iter()
            .zip(g.value(p.x_pa).data())
            .zip(g.value(p.delta_pa).data())
            .map(|((&pp, &pa), &d)| ((pp - pa) - d).abs() / (f64::EPSILON * pp.abs().max(pa.abs()).max(f64::MIN_POSITIVE)))
            .fold(0.0, f64::max);
        let residual = m.residual.as_ref().unwrap();
        let delta = decode_residual(&mut g, residual, lat.common, lat.unique, &skips).unwrap();
        let seg = decode_segmentation(&mut g, residual, m.seg_head.as_ref().unwrap(), lat.common, lat.unique, &skips).unwrap();
        (split_ok, additive, ulps, g.value(delta).clone(), g.value(seg).clone())
    };
    let (split_ok, additive, ulps, delta0, seg0) = outputs(&model);
    ok &= split_ok && additive && ulps <= 1.0;
    notes.push(format!("split {}", if split_ok { "exact" } else { "MISMATCH" }));
    notes.push(format!(
        "x_PP = x_PA + delta {} (subtraction form within {ulps:.2} ulp)",
        if additive { "bit-exact" } else { "MISMATCH" }
    ));

    // Shared decoder weights move both outputs; head weights move only segmentation.
    let mut shared = model.clone();
    perturb_first(&mut shared.residual.as_mut().unwrap().net, "");
    let (_, _, _, delta1, seg1) = outputs(&shared);
    let mut head = model.clone();
    perturb_first(&mut head.seg_head.as_mut().unwrap().net, "");
    let (_, _, _, delta2, seg2) = outputs(&head);
    let sharing = delta1 != delta0 && seg1 != seg0 && delta2 == delta0 && seg2 != seg0;
    ok &= sharing;
    notes.push(format!("weight sharing {}", if sharing { "confirmed" } else { "BROKEN" }));

    // The discriminator update must not move the generator, nor the generator update the discriminators.
    let batch = |seed: u64| uniform(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 1, 16, 16], -1.0, 1.0);
    let labeled = LabeledBatch { rows: vec![1], masks: Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 4 == 0) as u8 as f64) };
    let (xp, xa) = (batch(1), batch(2));
    let mut full = Trainer::new(model.clone(), LossWeights::default(), OptimizerConfig::default(), 3).unwrap();
    let mut d_only = Trainer::new(model.clone(), LossWeights::zero(), OptimizerConfig::default(), 3).unwrap();
    let (g0, d0) = (model.generator_checksum(), model.discriminator_checksum());
    full.training_step(&xp, &xa, &labeled).unwrap();
    d_only.training_step(&xp, &xa, &labeled).unwrap();
    let isolation = d_only.model.generator_checksum() == g0
        && d_only.model.discriminator_checksum() != d0
        && full.model.discriminator_checksum() == d_only.model.discriminator_checksum()
        && full.model.generator_checksum() != g0;
    ok &= isolation;
    notes.push(format!("D/G isolation {}", if isolation { "holds" } else { "VIOLATED" }));
    outcome(ok, notes.join("; "))
}

fn spectral_norm() -> Outcome {
    const MATRICES: usize = 50;
    const ITERS: usize = 20;
    // Weight shapes of the convolution and linear layers in the presets.
    let shapes = [
        (512, 4608),
        (256, 4608),
        (256, 2304),
        (128, 1152),
        (64, 576),
        (32, 288),
        (512, 256),
        (256, 256),
        (64, 16),
        (1, 32),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for k in 0..MATRICES {
        let (rows, cols) = if k < 2 { shapes[0] } else { shapes[rng.random_range(1..shapes.len())] };
        let std = (2.0 / cols as f64).sqrt();
        let w = Tensor::<f32>::from_fn(&[rows, cols], |_| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            ((-2.0 * (1.0 - a).ln()).sqrt() * (std::f64::consts::TAU * b).cos() * std) as f32
        });
        let mut state = SpectralState::random(rows, cols, &mut rng);
        let sigma_hat = power_iterate(&w, &mut state, ITERS) as f64;
        let m = DMatrix::from_row_iterator(rows, cols, w.data().iter().map(|&v| v as f64));
        let exact = m.singular_values().max();
        let ratio = exact / sigma_hat;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    outcome(
        lo >= 0.95 && hi <= 1.05,
        format!("{MATRICES} matrices up to 512x4608, {ITERS} iterations: sigma(W/sigma_hat) in [{lo:.4}, {hi:.4}] (need [0.95, 1.05])"),
    )
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn dataset_suite() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let digits = DigitFolds::procedural(2000, 400, 400, 17);
    let mut notes = Vec::new();
    let mut ok = true;
    for (preset, clutter) in [(ClutterPreset::Simple48, 8), (ClutterPreset::Hard48, 24), (ClutterPreset::Large128, 80)] {
        let specs = ClutterSpec::preset_folds_sized(preset, [400, 50, 50]);
        let dir = tmp.path().join(format!("{preset:?}"));
        let m = generate_cluttered_mnist(&specs, &digits, 99, &dir).unwrap();
        let counts_ok = m.records.iter().all(|r| r.clutter == Some(clutter));
        let train_p: Vec<_> = m.select(Fold::Train, Domain::P).collect();
        let labeled: Vec<_> = train_p.iter().filter(|r| r.labeled).collect();
        let expected = (0.01 * train_p.len() as f64).round() as usize;
        let labels_ok = labeled.len() == expected
            && labeled.iter().all(|r| r.digit_class == Some(9))
            && m.records.iter().filter(|r| r.labeled).count() == expected;
        let absence_ok = m
            .records
            .iter()
            .filter(|r| r.domain == Domain::A)
            .all(|r| r.digit_class.is_none() && r.mask_path.is_none() && !r.labeled);
        // Absence canvases are rendered without any digit layer.
        let render_ok = (0..20).all(|i| {
            let ex = render_example(&specs[0], digits.fold(Fold::Train), 99, 400 + i).unwrap();
            ex.mask.is_none() && ex.digit_class.is_none()
        });
        let again = tmp.path().join(format!("{preset:?}-again"));
        let m2 = generate_cluttered_mnist(&specs, &digits, 99, &again).unwrap();
        let (fa, fb) = (files_under(&dir), files_under(&again));
        let identical = m == m2
            && fa.len() == fb.len()
            && fa.iter().zip(&fb).all(|(a, b)| {
                a.strip_prefix(&dir).unwrap() == b.strip_prefix(&again).unwrap()
                    && std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
            });
        let reread = DatasetManifest::read(&dir.join("manifest.jsonl")).map(|r| r == m).unwrap_or(false);
        let valid = segtrans_data::validate(&m, Some(&dir)).is_valid();
        let pass = counts_ok && labels_ok && absence_ok && render_ok && identical && reread && valid;
        ok &= pass;
        notes.push(format!(
            "{preset:?}: {} examples, clutter {clutter} {}, {}/{} labeled all nines {}, absence digit-free {}, regeneration {}",
            m.records.len(),
            if counts_ok { "ok" } else { "WRONG" },
            labeled.len(),
            expected,
            if labels_ok { "ok" } else { "WRONG" },
            if absence_ok && render_ok { "ok" } else { "WRONG" },
            if identical && reread && valid { "byte-identical" } else { "DIFFERS" },
        ));
    }
    outcome(ok, notes.join("; "))
}

fn disk(size: usize, r: f32) -> Image {
    let c = (size as f32 - 1.0) / 2.0;
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            if (y - c).hypot(x - c) <= r { 1.0 } else { 0.0 }
        })
        .collect();
    Image { channels: 1, height: size, width: size, data }
}

fn augmentation_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    let image = Image {
        channels: 2,
        height: 40,
        width: 36,
        data: (0..2 * 40 * 36).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    };
    let mask = disk(36, 9.0);
    let mask = Image { height: 40, data: [mask.data.clone(), vec![0.0; 4 * 36]].concat(), ..mask };

    let identity_ok = (0..20).all(|s| {
        let (img, m) = augment(&image, Some(&mask), &AugmentConfig::identity(), s).unwrap();
        img == image && m.as_ref() == Some(&mask)
    });

    let cfg = AugmentConfig::default();
    let mut bounds_ok = true;
    let (mut max_rot, mut max_zoom, mut max_int) = (0.0f32, 0.0f32, 0.0f32);
    let mut spread = Vec::new();
    for _ in 0..1000 {
        let p = AugmentParams::sample(&cfg, &mut rng);
        max_rot = max_rot.max(p.rotation_deg.abs());
        max_zoom = max_zoom.max((p.zoom - 1.0).abs());
        max_int = max_int.max((p.intensity - 1.0).abs());
        bounds_ok &= p.rotation_deg.abs() <= 3.0
            && (p.zoom - 1.0).abs() <= 0.1 + 1e-6
            && (p.intensity - 1.0).abs() <= 0.1 + 1e-6
            && p.grid == 3
            && p.displacements.len() == 9;
        spread.extend(p.displacements.iter().flat_map(|&(dy, dx)| [dy as f64, dx as f64]));
    }
    let m = mean(&spread);
    let sd = (spread.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (spread.len() - 1) as f64).sqrt();
    bounds_ok &= (sd - 5.0).abs() < 0.25 && m.abs() < 0.25;

    let mut binary_ok = true;
    for s in 0..200 {
        let (_, out) = augment(&image, Some(&mask), &cfg, s).unwrap();
        let out = out.unwrap();
        binary_ok &= out.data.iter().all(|&v| v == 0.0 || v == 1.0) && (out.height, out.width) == (40, 36);
    }
    outcome(
        identity_ok && bounds_ok && binary_ok,
        format!(
            "identity {}, 1000 draws: |rot| <= {max_rot:.2} deg, |zoom-1| <= {max_zoom:.3}, |gain-1| <= {max_int:.3}, grid sd {sd:.2} px {}, masks binary {}",
            if identity_ok { "exact" } else { "BROKEN" },
            if bounds_ok { "ok" } else { "OUT OF BOUNDS" },
            if binary_ok { "ok" } else { "NO" }
        ),
    )
}

fn overfit_smoke() -> Outcome {
    const N: usize = 20;
    const MAX_STEPS: u64 = 200;
    const CHECK_EVERY: u64 = 10;
    let tmp = tempfile::tempdir().unwrap();
    let digits = DigitFolds::procedural(500, 50, 50, 7);
    let mut specs = ClutterSpec::preset_folds_sized(ClutterPreset::Simple48, [N, 1, 1]);
    specs[0].labeled_fraction = 0.0;
    generate_cluttered_mnist(&specs, &digits, 7, tmp.path()).unwrap();
    let data = Dataset::open(&tmp.path().join("manifest.jsonl")).unwrap();
    let p = data.records(Fold::Train, Domain::P);
    let a = data.records(Fold::Train, Domain::A);
    let (p_img, p_mask) = load_batch(&data, &p, None).unwrap();
    let (a_img, _) = load_batch(&data, &a, None).unwrap();
    let (x_p, x_a) = (stack(&p_img).unwrap(), stack(&a_img).unwrap());
    let masks: Vec<Image> = p_mask.into_iter().map(|m| m.unwrap()).collect();
    let labeled = LabeledBatch { rows: (0..N).collect(), masks: stack(&masks).unwrap() };

    let model = Model::<f32>::new(VariantKind::Proposed, Architecture::preset(segtrans_core::PresetName::Mnist48), 0).unwrap();
    let mut trainer = Trainer::new(model, LossWeights::default(), OptimizerConfig::default(), 0).unwrap();
    let train_dice = |m: &Model<f32>| {
        let pred = m.segment(&x_p, 0.5).unwrap();
        let plane = pred.numel() / N;
        let mut acc = DiceAccumulator::default();
        for (i, mask) in masks.iter().enumerate() {
            let q: Vec<bool> = pred.data()[i * plane..(i + 1) * plane].iter().map(|&v| v > 0.5).collect();
            let r: Vec<bool> = mask.data.iter().map(|&v| v > 0.5).collect();
            acc.add(Overlap::of(&q, &r));
        }
        acc.summary().unwrap().dice_mean
    };
    let mut trace = Vec::new();
    let mut dice = train_dice(&trainer.model);
    while trainer.step < MAX_STEPS {
        let r = trainer.training_step(&x_p, &x_a, &labeled).unwrap();
        if r.step % CHECK_EVERY == 0 {
            dice = train_dice(&trainer.model);
            trace.push(format!("{}:{dice:.3}", r.step));
            eprintln!("C7 step {} dice {dice:.4} seg loss {:.4}", r.step, r.losses.seg);
            if dice >= 0.9 {
                break;
            }
        }
    }
    outcome(
        dice >= 0.9,
        format!(
            "train Dice {dice:.3} after {} generator steps on {N} labeled examples (need >= 0.9 within {MAX_STEPS}); trace {}",
            trainer.step,
            trace.join(" ")
        ),
    )
}

const VARIANTS: [&str; 3] = ["proposed", "ae_baseline", "seg_only"];

/// Reports of the three variants under `$var/<prefix>-<variant>/`, written
/// by `segtrans train` with the configs in `configs/`.
fn variant_reports(var: &str, prefix: &str) -> std::result::Result<(PathBuf, Vec<RunReport>), Outcome> {
    let Some(root) = std::env::var_os(var).map(PathBuf::from) else {
        return Err(Outcome::NotRun(format!(
            "needs hours of GAN training; train configs/{prefix}-*.toml and set {var} to their output root"
        )));
    };
    let mut reports = Vec::new();
    for v in VARIANTS {
        let path = root.join(format!("{prefix}-{v}")).join("report.json");
        match std::fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string())) {
            Ok(r) => reports.push(r),
            Err(e) => return Err(outcome(false, format!("cannot read {}: {e}", path.display()))),
        }
    }
    Ok((root, reports))
}

fn seed_scores(r: &RunReport) -> Vec<(u64, f64)> {
    r.seeds.iter().map(|s| (s.seed, s.test.dice_mean)).collect()
}

fn desk_ordering() -> Outcome {
    let (_, reports) = match variant_reports("SEGTRANS_DESK_RUNS", "simple48-desk") {
        Ok(r) => r,
        Err(o) => return o,
    };
    let (proposed, ae, seg) = (seed_scores(&reports[0]), seed_scores(&reports[1]), seed_scores(&reports[2]));
    let mut ordered = 0;
    let mut rows = Vec::new();
    for &(seed, p) in &proposed {
        let a = ae.iter().find(|s| s.0 == seed).map(|s| s.1);
        let s = seg.iter().find(|s| s.0 == seed).map(|s| s.1);
        if let (Some(a), Some(s)) = (a, s) {
            ordered += usize::from(p > a && a > s);
            rows.push(format!("seed {seed}: {p:.3}/{a:.3}/{s:.3}"));
        }
    }
    let gap = reports[0].test_dice_mean.mean - reports[2].test_dice_mean.mean;
    outcome(
        ordered >= 2 && gap >= 0.05,
        format!(
            "proposed/ae/seg-only test Dice {}; ordered in {ordered} of {} seeds (need 2), proposed - seg-only = {gap:.3} (need 0.05)",
            rows.join(", "),
            rows.len()
        ),
    )
}

fn residual_localizes() -> Outcome {
    let (root, reports) = match variant_reports("SEGTRANS_DESK_RUNS", "simple48-desk") {
        Ok(r) => r,
        Err(o) => return o,
    };
    let mut ratios = Vec::new();
    for s in &reports[0].seeds {
        let path = root.join("simple48-desk-proposed").join(format!("seed_{}", s.seed)).join("best.ckpt");
        let result = load_checkpoint(&path).map_err(|e| e.to_string()).and_then(|state| {
            let json = state.progress.config_json.clone().ok_or("checkpoint has no configuration")?;
            let cfg: ExperimentConfig = serde_json::from_str(&json).map_err(|e| e.to_string())?;
            let data = Dataset::open(&cfg.data.manifest).map_err(|e| e.to_string())?;
            residual_localization(&state.trainer.model, &data, Fold::Test, Some(200)).map_err(|e| e.to_string())
        });
        match result {
            Ok(r) => ratios.push((s.seed, r)),
            Err(e) => return outcome(false, format!("{}: {e}", path.display())),
        }
    }
    let pass = !ratios.is_empty() && ratios.iter().all(|(_, r)| r.inside >= 2.0 * r.outside);
    let rows: Vec<String> = ratios
        .iter()
        .map(|(seed, r)| format!("seed {seed}: inside {:.4} / outside {:.4} = {:.2}x over {} images", r.inside, r.outside, r.ratio, r.n))
        .collect();
    outcome(pass, format!("{} (need >= 2x)", rows.join("; ")))
}

fn full_scale() -> Outcome {
    let (_, reports) = match variant_reports("SEGTRANS_FULL_RUNS", "simple48") {
        Ok(r) => r,
        Err(o) => return o,
    };
    let targets = [(0.79, 0.05), (0.75, 0.05), (0.61, 0.07)];
    let mut pass = true;
    let mut rows = Vec::new();
    for ((r, (target, tol)), v) in reports.iter().zip(targets).zip(VARIANTS) {
        let m = r.test_dice_mean;
        pass &= (m.mean - target).abs() <= tol;
        rows.push(format!("{v} {:.3} ({:.3}) vs {target} +/- {tol}", m.mean, m.std));
    }
    outcome(pass, rows.join("; "))
}
