use cagan_al::cagan::loss::{critic_input_grads, gp_term};
use cagan_al::cagan::{train_cagan, CaganData, Critic, LossWeights};
use cagan_al::config::{CaganConfig, LabelMode};
use cagan_al::data::{one_hot, ImageSample, Provenance};
use cagan_al::gradcheck::{critic_penalty_error, critic_source_error, generator_objective_error};
use cagan_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;
const C: usize = 3;
const Z: usize = 4;

fn images(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(vec![n, 1, SIDE, SIDE], |_| rng.random_range(0.05..0.95))
}

#[test]
fn critic_source_gradient_matches_finite_differences() {
    let e = critic_source_error(20, 1);
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn generator_objective_gradient_matches_finite_differences() {
    let e = generator_objective_error(20, 2);
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn penalty_gradient_matches_finite_differences_of_the_critic_loss() {
    let e = critic_penalty_error(5, 3);
    assert!(e < 1e-3, "relative error {e}");
}

/// `D(x) = a * sum(x)`, whose input gradient has norm `a * sqrt(P)` everywhere.
struct Linear(f64);

impl Critic<f64> for Linear {
    fn score(&self, g: &mut Graph<f64>, x: Var) -> Var {
        let n = g.shape(x)[0];
        let per: usize = g.shape(x)[1..].iter().product();
        let m = g.mean_per_sample(x);
        let s = g.scale(m, self.0 * per as f64);
        g.reshape(s, &[n])
    }
}

#[test]
fn penalty_of_an_analytic_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let none: [&ParamStore<f64>; 0] = [];
    for a in [0.1, 0.25, 1.0, 3.0] {
        let x = images(4, &mut rng);
        let gp = gp_term(&critic_input_grads(&Linear(a), &none, x));
        let expect = (a * ((SIDE * SIDE) as f64).sqrt() - 1.0).powi(2);
        assert!((gp - expect).abs() < 1e-9 * expect.max(1.0), "{a}: {gp} vs {expect}");
    }
}

#[test]
fn logged_losses_replay_from_their_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<ImageSample> = (0..12)
        .map(|i| ImageSample {
            id: format!("s{i}"),
            side: SIDE,
            pixels: (0..SIDE * SIDE).map(|_| rng.random_range(0.0..1.0)).collect(),
            labels: one_hot(i % C, C),
            patient_id: format!("p{i}"),
            mask_id: None,
            provenance: Provenance::Real,
            base_id: None,
        })
        .collect();
    let latents: Vec<Vec<Vec<f32>>> = (0..12)
        .map(|_| vec![(0..Z).map(|_| rng.random_range(-1.0..1.0)).collect()])
        .collect();
    let data = CaganData {
        images: samples.iter().collect(),
        latents,
    };
    let cfg = CaganConfig {
        iters: 10,
        batch: 4,
        g_base: 2,
        d_base: 2,
        res_blocks: 1,
        ..Default::default()
    };
    let ck = train_cagan(&data, C, LabelMode::Exclusive, None, &cfg, 0, None, None).unwrap();
    let w = LossWeights::from(&cfg);
    assert_eq!(ck.history.len(), 10);
    for r in &ck.history {
        assert!((r.l_d - (-r.l_adv + w.lambda_cls * r.l_cls_r)).abs() < 1e-9, "{r:?}");
        assert_eq!(r.l_g.is_some(), r.iter % cfg.n_critic == cfg.n_critic - 1);
        if let (Some(lg), Some(cf), Some(ct)) = (r.l_g, r.l_cls_f, r.l_content) {
            assert!(
                (lg - (r.l_adv + w.lambda_cls * cf + w.lambda_content * ct)).abs() < 1e-9,
                "{r:?}"
            );
        }
    }
}
