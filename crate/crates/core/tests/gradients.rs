//! Analytic gradients of every loss against central finite differences on
//! a 16×16 double-precision toy configuration.

use candle_core::{DType, Device, Tensor, Var};
use metgan_core::critics::{Discriminator, DiscriminatorSpec};
use metgan_core::losses::{
    cycle_loss, discriminator_loss, generator_adversarial_loss, pair_loss, segmentation_loss, AdversarialObjective,
    Batch, LossTerms, LossWeights,
};
use metgan_core::metgen::{Generator, GeneratorSpec, Translate};
use metgan_core::segmentor::{Segmentor, SegmentorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const REL: f64 = 1e-3;
const PROBES_PER_TENSOR: usize = 2;

fn toy_spec() -> GeneratorSpec {
    GeneratorSpec {
        image_size: 16,
        unet_depth: 2,
        base_channels: 2,
        max_channels: 4,
        spade_blocks: 1,
        spade_hidden_channels: 2,
        spade_feature_channels: 2,
        spade_downsample: 2,
        fusion_levels: vec![0, 1],
    }
}

struct Toy {
    f: Generator,
    g: Generator,
    d: Discriminator,
    seg: Segmentor,
    batch: Batch,
}

/// Zero-initialized biases put ReLU inputs exactly on the kink wherever the
/// label is empty; jitter every parameter to reach a generic point.
fn jitter(vars: &[(String, Var)], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, v) in vars {
        let t = v.as_tensor();
        let noise: Vec<f64> = (0..t.elem_count()).map(|_| 0.05 * (rng.random::<f64>() - 0.5)).collect();
        let noise = Tensor::from_vec(noise, t.shape().clone(), &Device::Cpu).unwrap();
        v.set(&(t + noise).unwrap()).unwrap();
    }
}

fn toy() -> Toy {
    let dev = Device::Cpu;
    let f = Generator::with_dtype(toy_spec(), 1, DType::F64, &dev).unwrap();
    let g = Generator::with_dtype(toy_spec(), 2, DType::F64, &dev).unwrap();
    jitter(&f.params().vars(), 11);
    jitter(&g.params().vars(), 12);
    let d = Discriminator::with_dtype(
        DiscriminatorSpec {
            n_layers: 1,
            base_channels: 2,
            conditional: false,
        },
        3,
        DType::F64,
        &dev,
    )
    .unwrap();
    jitter(&d.params().vars(), 13);
    let seg_spec = SegmentorSpec {
        unet_depth: 1,
        base_channels: 2,
        max_channels: 4,
        threshold: 0.5,
    };
    let seg = Segmentor::with_dtype(seg_spec, 4, DType::F64, &dev).unwrap().freeze().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |f: &dyn Fn(f64) -> f64| {
        let v: Vec<f64> = (0..512).map(|_| f(rng.random::<f64>())).collect();
        Tensor::from_vec(v, (2, 1, 16, 16), &dev).unwrap()
    };
    let x = draw(&|u| 2.0 * u - 1.0);
    let y = draw(&|u| 2.0 * u - 1.0);
    let label = draw(&|u| f64::from(u8::from(u > 0.7)));
    Toy {
        f,
        g,
        d,
        seg,
        batch: Batch { x, y, label, paired: true },
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Compares backprop against central differences on random entries of
/// every parameter tensor in `vars`. An entry where the central differences
/// at `H` and `H / 10` disagree sits on a ReLU or L1 kink and is redrawn;
/// such entries must stay rare. Returns the number of entries probed with
/// a nonzero analytic gradient.
fn check(name: &str, vars: &[(String, Var)], loss: &dyn Fn() -> Tensor) -> usize {
    let value = loss();
    let level = scalar(&value);
    let grads = value.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut live, mut probed, mut kinks) = (0, 0, 0);
    for (pname, var) in vars {
        let Some(grad) = grads.get(var.as_tensor()) else {
            continue;
        };
        let grad: Vec<f64> = grad.flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let shape = var.as_tensor().shape().clone();
        let mut done = 0;
        let mut attempts = 0;
        while done < PROBES_PER_TENSOR.min(base.len()) && attempts < 4 * PROBES_PER_TENSOR {
            attempts += 1;
            let k = rng.random_range(0..base.len());
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[k] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                scalar(&loss())
            };
            let central = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
            let (fd, fd_fine) = (central(H), central(H / 10.0));
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
            // resolution of a central difference at step h
            let floor = |h: f64| 16.0 * f64::EPSILON * level.abs().max(1.0) / h;
            let close = |a: f64, b: f64, h: f64| (a - b).abs() <= REL * a.abs().max(b.abs()) + floor(h);
            if !close(fd, fd_fine, H / 10.0) {
                kinks += 1;
                continue;
            }
            let an = grad[k];
            assert!(
                close(an, fd, H),
                "{name}: {pname}[{k}] analytic {an:e} vs finite difference {fd:e}"
            );
            done += 1;
            probed += 1;
            if an != 0.0 {
                live += 1;
            }
        }
    }
    assert!(kinks * 10 <= probed, "{name}: {kinks} non-differentiable probes out of {probed}");
    live
}

#[test]
pub fn cycle_loss_gradient() {
    let t = toy();
    let vars = [t.f.params().vars(), t.g.params().vars()].concat();
    let live = check("cycle", &vars, &|| cycle_loss(&t.f, &t.g, &t.batch).unwrap().total().unwrap());
    assert!(live > 0);
}

#[test]
pub fn pair_loss_gradient() {
    let t = toy();
    let vars = [t.f.params().vars(), t.g.params().vars()].concat();
    let live = check("pair", &vars, &|| pair_loss(&t.f, &t.g, &t.batch).unwrap().total().unwrap());
    assert!(live > 0);
}

#[test]
pub fn segmentation_loss_gradient_reaches_generator_only() {
    let t = toy();
    let loss = || {
        let fake = t.f.translate(&t.batch.x, &t.batch.label).unwrap();
        segmentation_loss(&t.seg, &fake, &t.batch.label).unwrap()
    };
    let live = check("segm", &t.f.params().vars(), &loss);
    assert!(live > 0, "no gradient through the frozen segmentor");
    let grads = loss().backward().unwrap();
    for (name, p) in t.seg.params().tensors() {
        assert!(grads.get(&p).is_none(), "frozen segmentor tensor {name} received a gradient");
    }
    let norm: f64 = t
        .f
        .params()
        .vars()
        .iter()
        .filter_map(|(_, v)| grads.get(v.as_tensor()))
        .map(|g| scalar(&g.sqr().unwrap().sum_all().unwrap()))
        .sum();
    assert!(norm > 0.0);
}

#[test]
pub fn adversarial_gradients() {
    let t = toy();
    for obj in [AdversarialObjective::LeastSquares, AdversarialObjective::CrossEntropy] {
        let gen = || {
            let fake = t.f.translate(&t.batch.x, &t.batch.label).unwrap();
            generator_adversarial_loss(&t.d.patch_scores(&fake).unwrap(), obj).unwrap()
        };
        assert!(check("generator adversarial", &t.f.params().vars(), &gen) > 0);
        let fake = t.f.translate(&t.batch.x, &t.batch.label).unwrap().detach();
        let disc = || {
            discriminator_loss(
                &t.d.patch_scores(&t.batch.y).unwrap(),
                &t.d.patch_scores(&fake).unwrap(),
                obj,
            )
            .unwrap()
        };
        assert!(check("critic", &t.d.params().vars(), &disc) > 0);
    }
}

#[test]
pub fn composed_objective_gradient() {
    let t = toy();
    let w = LossWeights::default();
    let loss = || {
        let fake = t.f.translate(&t.batch.x, &t.batch.label).unwrap();
        let terms = LossTerms {
            l_d: Some(generator_adversarial_loss(&t.d.patch_scores(&fake).unwrap(), w.adversarial_objective).unwrap()),
            l_cycle: Some(cycle_loss(&t.f, &t.g, &t.batch).unwrap().total().unwrap()),
            l_segm: Some(segmentation_loss(&t.seg, &fake, &t.batch.label).unwrap()),
            l_pair: Some(pair_loss(&t.f, &t.g, &t.batch).unwrap().total().unwrap()),
        };
        terms.compose(&w).unwrap().unwrap()
    };
    let vars = [t.f.params().vars(), t.g.params().vars()].concat();
    assert!(check("final", &vars, &loss) > 0);
}

