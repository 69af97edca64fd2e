//! Finite-difference checks of every mapping loss.

use fairmap_core::mapping::{
    critic_distance, discriminator_objective, generator_objective, loss_c, loss_discriminator,
    loss_gan, loss_protection, loss_recons, mi_soft, LossWeights, Networks, ProtectionLoss,
    TrainConfig,
};
use fairmap_core::nn::{grad_check, Activation, DenseNet, Gradients};
use ndarray::Array2;
use rand::Rng;

const H: f64 = 1e-4;

fn batch(seed: u64, n: usize, m: usize, k: usize) -> (Array2<f64>, Vec<usize>) {
    let mut rng = fairmap_core::rng::seeded(seed);
    let x = Array2::from_shape_fn((n, m), |_| rng.random::<f64>());
    let groups = (0..n).map(|i| i % k).collect();
    (x, groups)
}

fn generator(seed: u64, m: usize) -> DenseNet {
    DenseNet::new(
        &[m, 2 * m, 2 * m, m],
        &[Activation::Tanh, Activation::Tanh, Activation::Sigmoid],
        seed,
    )
    .unwrap()
}

fn softmax_net(seed: u64, m: usize, k: usize) -> DenseNet {
    DenseNet::new(&[m, 8, k], &[Activation::Tanh, Activation::Softmax], seed).unwrap()
}

/// Loss of a downstream head applied to G's output.
fn through<F>(g: &DenseNet, head: &DenseNet, x: &Array2<f64>, f: F) -> (f64, Gradients)
where
    F: Fn(&Array2<f64>) -> (f64, Array2<f64>),
{
    let gt = g.forward_trace(x).unwrap();
    let ht = head.forward_trace(gt.output()).unwrap();
    let (v, dout) = f(ht.output());
    let hb = head.backward(&ht, &dout).unwrap();
    let gb = g.backward(&gt, &hb.input_grad).unwrap();
    (v, gb.grads)
}

#[test]
fn reconstruction_gradient() {
    for seed in 0..5 {
        let (x, _) = batch(seed, 7, 4, 2);
        let g = generator(seed + 100, 4);
        let report = grad_check(
            &g,
            |net| {
                let t = net.forward_trace(&x).unwrap();
                let lg = loss_recons(&x, t.output()).unwrap();
                (lg.value, net.backward(&t, &lg.grad).unwrap().grads)
            },
            H,
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn head_losses_gradients() {
    for seed in 0..5 {
        let k = 2 + (seed as usize % 3);
        let (x, groups) = batch(seed, 9, 3, k);
        let g = generator(seed + 7, 3);
        let head = softmax_net(seed + 11, 3, k);
        let critic = DenseNet::new(&[3, 5, 1], &[Activation::Tanh, Activation::Linear], seed).unwrap();
        type Check<'a> = (&'static str, f64, Box<dyn Fn(&DenseNet) -> (f64, Gradients) + 'a>);
        let checks: Vec<Check> = vec![
            ("c", 1e-4, Box::new(|n: &DenseNet| through(n, &head, &x, |p| {
                let l = loss_c(p).unwrap();
                (l.value, l.grad)
            }))),
            ("gan", 1e-4, Box::new(|n: &DenseNet| through(n, &critic, &x, |s| {
                let l = loss_gan(s).unwrap();
                (l.value, l.grad)
            }))),
            ("dstd", 1e-4, Box::new(|n: &DenseNet| through(n, &critic, &x, |s| {
                let l = critic_distance(s, &groups).unwrap();
                (l.value, l.grad)
            }))),
            ("s_ber", 1e-4, Box::new(|n: &DenseNet| through(n, &head, &x, |p| {
                let l = loss_protection(p, &groups, ProtectionLoss::Ber).unwrap();
                (l.value, l.grad)
            }))),
            ("s_acc", 1e-4, Box::new(|n: &DenseNet| through(n, &head, &x, |p| {
                let l = loss_protection(p, &groups, ProtectionLoss::Acc).unwrap();
                (l.value, l.grad)
            }))),
            ("d_ber", 1e-4, Box::new(|n: &DenseNet| through(n, &head, &x, |p| {
                let l = loss_discriminator(p, &groups, ProtectionLoss::Ber).unwrap();
                (l.value, l.grad)
            }))),
            ("mi", 1e-3, Box::new(|n: &DenseNet| through(n, &head, &x, |p| {
                let l = mi_soft(p, &groups).unwrap();
                (l.value, l.grad)
            }))),
        ];
        for (name, tol, f) in &checks {
            let report = grad_check(&g, f, H, *tol);
            assert!(report.passed, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn full_objectives() {
    for seed in 0..3 {
        let (x, groups) = batch(seed, 12, 3, 3);
        let cfg = TrainConfig {
            seed,
            weights: LossWeights {
                lambda_rec: 1.3,
                lambda_c: 0.7,
                lambda_gan: 2.0,
                lambda_d: 1.1,
                lambda_d_mi: 0.5,
                lambda_g_mi: 0.9,
                lambda_dstd_gan: 1.5,
            },
            hidden_width: 6,
            ..TrainConfig::default()
        };
        let nets = Networks::init(3, 3, &cfg).unwrap();
        let r = grad_check(
            &nets.generator,
            |g| {
                let mut n = nets.clone();
                n.generator = g.clone();
                let (t, grads) = generator_objective(&n, &x, &groups, &cfg).unwrap();
                (t.total, grads)
            },
            H,
            1e-3,
        );
        assert!(r.passed, "generator seed {seed}: {r:?}");
        let r = grad_check(
            &nets.disc_head,
            |h| {
                let mut n = nets.clone();
                n.disc_head = h.clone();
                let (t, grads) = discriminator_objective(&n, &x, &groups, &cfg).unwrap();
                (t.total, grads.head)
            },
            H,
            1e-3,
        );
        assert!(r.passed, "disc head seed {seed}: {r:?}");
        let r = grad_check(
            &nets.disc_trunk,
            |tr| {
                let mut n = nets.clone();
                n.disc_trunk = tr.clone();
                let (t, grads) = discriminator_objective(&n, &x, &groups, &cfg).unwrap();
                (t.total, grads.trunk)
            },
            H,
            1e-3,
        );
        assert!(r.passed, "disc trunk seed {seed}: {r:?}");
    }
}
