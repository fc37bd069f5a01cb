use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2ig_core::nn::ParamStore;
use s2ig_core::rdg::{
    discriminator_loss, discriminator_phase, generator_adversarial_loss, generator_loss, generator_phase,
    optimizers, relation_supervisor_loss, DiscriminatorOutput, Generator, Mode, RdgModel, RelationSet,
    RelationSupervisor, DISCRIMINATOR_PREFIXES, GENERATOR_PREFIXES,
};

mod support;
use support::*;

fn vars_with(model: &RdgModel, prefixes: &[&str]) -> Vec<Var> {
    model.params().vars_with_prefix(prefixes)
}

#[test]
fn relation_loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut ps = ParamStore::new(seed, DType::F64);
        let rs = RelationSupervisor::new(&mut ps, "rs", 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let fake = Var::from_tensor(&uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0)).unwrap();
        let gt = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let same = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let other = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let loss = || {
            let set = RelationSet {
                fake: fake.as_tensor().clone(),
                ground_truth: gt.clone(),
                same_class: same.clone(),
                mismatched: other.clone(),
            };
            relation_supervisor_loss(&rs, &set).unwrap().total
        };
        let mut vars = ps.all_vars();
        let params_err = worst_relative_error(&vars, &loss, &mut rng, 4);
        vars = vec![fake.clone()];
        let pixel_err = worst_relative_error(&vars, &loss, &mut rng, 4);
        assert!(params_err < 1e-3 && pixel_err < 1e-3, "seed {seed}: {params_err} {pixel_err}");
    }
}

struct Instance {
    model: RdgModel,
    cond: Tensor,
    z: Tensor,
    reals: Vec<Tensor>,
}

fn instance(seed: u64, scales: Vec<usize>) -> Instance {
    let cfg = tiny(scales.clone());
    let model = RdgModel::with_dtype(cfg, 5, seed, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let cond = uniform(&mut rng, &[2, 5], -1.0, 1.0);
    let z = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    let reals = scales.iter().map(|&s| uniform(&mut rng, &[2, 3, s, s], -1.0, 1.0)).collect();
    Instance { model, cond, z, reals }
}

#[test]
fn generator_scale_losses_match_finite_differences() {
    for seed in 0..20 {
        let inst = instance(seed, vec![8, 16]);
        for i in 0..2 {
            let loss = || {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let (code, pyramid) = inst.model.generate(&inst.cond, &inst.z, Mode::Train, &mut rng).unwrap();
                let out = inst.model.discriminators[i].forward(&pyramid.images[i], &code.c).unwrap();
                generator_adversarial_loss(&out).unwrap().loss
            };
            let vars = vars_with(&inst.model, &GENERATOR_PREFIXES);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let err = worst_relative_error(&vars, &loss, &mut rng, 4);
            assert!(err < 1e-3, "seed {seed} scale {i}: {err}");
        }
    }
}

#[test]
fn discriminator_scale_losses_match_finite_differences() {
    for seed in 0..20 {
        let inst = instance(seed, vec![8, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (code, pyramid) = inst.model.generate(&inst.cond, &inst.z, Mode::Train, &mut rng).unwrap();
        let c = code.c.detach();
        for i in 0..2 {
            let fake = pyramid.images[i].detach();
            let loss = || {
                let d = &inst.model.discriminators[i];
                let l = discriminator_loss(&d.forward(&inst.reals[i], &c).unwrap(), &d.forward(&fake, &c).unwrap());
                l.unwrap().loss
            };
            let vars = vars_with(&inst.model, &[&format!("rdg.disc{i}.")]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let err = worst_relative_error(&vars, &loss, &mut rng, 4);
            assert!(err < 1e-3, "seed {seed} scale {i}: {err}");
        }
    }
}

fn constant(p: f64, n: usize) -> DiscriminatorOutput {
    let t = Tensor::full(p, n, &Device::Cpu).unwrap();
    DiscriminatorOutput {
        unconditional: t.clone(),
        conditional: t,
    }
}

fn zero_all(ps: &ParamStore) {
    for v in ps.all_vars() {
        v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
    }
}

#[test]
fn uniform_relation_classifier_gives_four_log_three() {
    let mut ps = ParamStore::new(0, DType::F64);
    let rs = RelationSupervisor::new(&mut ps, "rs", 8, 2).unwrap();
    zero_all(&ps);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let set = RelationSet {
        fake: uniform(&mut rng, &[3, 3, 8, 8], -1.0, 1.0),
        ground_truth: uniform(&mut rng, &[3, 3, 8, 8], -1.0, 1.0),
        same_class: uniform(&mut rng, &[3, 3, 8, 8], -1.0, 1.0),
        mismatched: uniform(&mut rng, &[3, 3, 8, 8], -1.0, 1.0),
    };
    let l = relation_supervisor_loss(&rs, &set).unwrap();
    assert!((scalar(&l.total) - 4.0 * 3f64.ln()).abs() < 1e-6);

    // Three half-confident discriminators plus the uniform classifier.
    let fakes = vec![constant(0.5, 3), constant(0.5, 3), constant(0.5, 3)];
    let kl = Tensor::new(0.0f64, &Device::Cpu).unwrap();
    let g = generator_loss(&fakes, Some(&l), &kl, 1.0).unwrap();
    let expected = 3.0 * 2.0 * 2f64.ln() + 4.0 * 3f64.ln();
    assert!((scalar(&g.total) - expected).abs() < 1e-6);
    assert!((expected - 8.552).abs() < 2e-3);
}

#[test]
fn dense_stacking_routes_the_first_hidden_feature_to_the_last_stage() {
    for dense in [true, false] {
        let mut cfg = tiny(vec![8, 16, 32]);
        cfg.flags.dense_stacking = dense;
        let mut ps = ParamStore::new(4, DType::F64);
        let g = Generator::new(&mut ps, "g", &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = uniform(&mut rng, &[2, 4], -1.0, 1.0);
        let c = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let h0 = g.initial_stage(&z, &c).unwrap();
        let h1 = g.stage(1, &[h0.clone()], &c).unwrap();
        let h2 = g.stage(2, &[h0.clone(), h1.clone()], &c).unwrap();
        // Surgery: replace h0 while holding h1 fixed.
        let h0_zero = h0.zeros_like().unwrap();
        let h2_cut = g.stage(2, &[h0_zero, h1.clone()], &c).unwrap();
        let diff = scalar(&(h2 - h2_cut).unwrap().abs().unwrap().max_all().unwrap());
        if dense {
            assert!(diff > 1e-6, "dense stage ignored h0");
        } else {
            assert_eq!(diff, 0.0, "plain stacking leaked h0 past h1");
        }
        // Same law through the gradient.
        let h0_var = Var::from_tensor(&h0).unwrap();
        let out = g.stage(2, &[h0_var.as_tensor().clone(), h1.detach()], &c).unwrap().sum_all().unwrap();
        let grads = out.backward().unwrap();
        let gnorm = grads
            .get(h0_var.as_tensor())
            .map(|t| scalar(&t.abs().unwrap().sum_all().unwrap()))
            .unwrap_or(0.0);
        assert_eq!(gnorm > 0.0, dense);
    }
}

#[test]
fn pyramid_shapes_and_range() {
    let inst = instance(2, vec![8, 16, 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, p) = inst.model.generate(&inst.cond, &inst.z, Mode::Infer, &mut rng).unwrap();
    for (img, s) in p.images.iter().zip([8, 16, 32]) {
        assert_eq!(img.dims(), &[2, 3, s, s]);
        let m = scalar(&img.abs().unwrap().max_all().unwrap());
        assert!(m <= 1.0);
    }
    let (_, again) = inst.model.generate(&inst.cond, &inst.z, Mode::Infer, &mut rng).unwrap();
    assert_eq!(scalar(&(p.final_image() - again.final_image()).unwrap().abs().unwrap().max_all().unwrap()), 0.0);
}

fn relation_set(inst: &Instance, pyramid: &s2ig_core::rdg::ImagePyramid) -> RelationSet {
    let gt = inst.reals.last().unwrap().clone();
    RelationSet {
        fake: pyramid.final_image().clone(),
        same_class: gt.flip_batch(),
        mismatched: (gt.clone() * 0.5).unwrap(),
        ground_truth: gt,
    }
}

trait FlipBatch {
    fn flip_batch(&self) -> Tensor;
}

impl FlipBatch for Tensor {
    fn flip_batch(&self) -> Tensor {
        let n = self.dims()[0];
        let idx = Tensor::from_vec((0..n as u32).rev().collect::<Vec<_>>(), n, &Device::Cpu).unwrap();
        self.index_select(&idx, 0).unwrap()
    }
}

#[test]
fn discriminator_objective_is_detached_from_the_generator() {
    let inst = instance(5, vec![8, 16]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (code, pyramid) = inst.model.generate(&inst.cond, &inst.z, Mode::Train, &mut rng).unwrap();
    let set = relation_set(&inst, &pyramid);
    let d = discriminator_phase(&inst.model, &inst.reals, &pyramid, &code, &set).unwrap();
    let grads = d.total.backward().unwrap();
    for v in vars_with(&inst.model, &GENERATOR_PREFIXES) {
        if let Some(g) = grads.get(v.as_tensor()) {
            assert_eq!(scalar(&g.abs().unwrap().sum_all().unwrap()), 0.0);
        }
    }
    let touched = vars_with(&inst.model, &DISCRIMINATOR_PREFIXES)
        .iter()
        .filter(|v| grads.get(v.as_tensor()).is_some())
        .count();
    assert!(touched > 0);
}

#[test]
fn alternating_steps_touch_only_their_own_side() {
    let inst = instance(6, vec![8, 16]);
    let params = inst.model.params();
    let (mut opt_g, mut opt_d) = optimizers(&inst.model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (code, pyramid) = inst.model.generate(&inst.cond, &inst.z, Mode::Train, &mut rng).unwrap();
    let set = relation_set(&inst, &pyramid);

    let g0 = params.content_hash(&GENERATOR_PREFIXES).unwrap();
    let d0 = params.content_hash(&DISCRIMINATOR_PREFIXES).unwrap();
    let d = discriminator_phase(&inst.model, &inst.reals, &pyramid, &code, &set).unwrap();
    opt_d.step(&d.total.backward().unwrap()).unwrap();
    let d1 = params.content_hash(&DISCRIMINATOR_PREFIXES).unwrap();
    assert_eq!(params.content_hash(&GENERATOR_PREFIXES).unwrap(), g0);
    assert_ne!(d1, d0);

    let g = generator_phase(&inst.model, &pyramid, &code, &set).unwrap();
    opt_g.step(&g.total.backward().unwrap()).unwrap();
    assert_eq!(params.content_hash(&DISCRIMINATOR_PREFIXES).unwrap(), d1);
    assert_ne!(params.content_hash(&GENERATOR_PREFIXES).unwrap(), g0);
}

#[test]
fn generator_loss_reaches_the_noise() {
    for seed in 0..5 {
        let inst = instance(seed, vec![8]);
        let z = Var::from_tensor(&inst.z).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (code, pyramid) = inst.model.generate(&inst.cond, z.as_tensor(), Mode::Train, &mut rng).unwrap();
        let set = relation_set(&inst, &pyramid);
        let g = generator_phase(&inst.model, &pyramid, &code, &set).unwrap();
        let grads = g.total.backward().unwrap();
        let norm = scalar(&grads.get(z.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap());
        assert!(norm > 0.0 && norm.is_finite());
    }
}

#[test]
fn disabling_the_supervisor_leaves_the_pure_adversarial_sum() {
    let mut inst = instance(3, vec![8]);
    let mut cfg = inst.model.config.clone();
    cfg.flags.relation_supervisor = false;
    inst.model = RdgModel::with_dtype(cfg, 5, 3, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (code, pyramid) = inst.model.generate(&inst.cond, &inst.z, Mode::Infer, &mut rng).unwrap();
    let set = relation_set(&inst, &pyramid);
    let g = generator_phase(&inst.model, &pyramid, &code, &set).unwrap();
    assert!(g.relation.is_none());
    let adv: f64 = g.adversarial.iter().map(scalar).sum();
    let expected = adv + scalar(&code.kl) * inst.model.config.kl_weight;
    assert!((scalar(&g.total) - expected).abs() < 1e-7);
}

#[test]
fn dimension_mismatches_are_rejected() {
    let inst = instance(0, vec![8]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad_cond = Tensor::zeros((2, 6), DType::F64, &Device::Cpu).unwrap();
    assert!(matches!(
        inst.model.generate(&bad_cond, &inst.z, Mode::Infer, &mut rng),
        Err(s2ig_core::Error::Compatibility(_))
    ));
    let bad_z = Tensor::zeros((2, 5), DType::F64, &Device::Cpu).unwrap();
    assert!(inst.model.generate(&inst.cond, &bad_z, Mode::Infer, &mut rng).is_err());
    let wrong_scale = Tensor::zeros((2, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
    assert!(inst.model.relation.logits(&wrong_scale, &wrong_scale).is_err());
}
