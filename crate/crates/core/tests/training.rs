use mmbnn::bnn::Activation;
use mmbnn::conjlayer;
use mmbnn::models::*;
use mmbnn::ndiff::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn arch(width: usize) -> Architecture {
    Architecture {
        hidden: vec![width, width],
        activation: Activation::Tanh,
    }
}

fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn modality(name: &str, xs: &[f64], f: impl Fn(f64) -> f64, sd: f64, rng: &mut ChaCha8Rng) -> ModalityData {
    let noise = Normal::new(0.0, sd).unwrap();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| f(x) + if sd > 0.0 { noise.sample(rng) } else { 0.0 })
        .collect();
    ModalityData::new(name, Array::column(xs), Array::column(&ys)).unwrap()
}

fn mean_prediction(model: &ModelState, data: &TrainingData, xq: &Array, n: usize, seed: u64) -> Vec<f64> {
    let pred = predict(model, data, xq, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    pred.samples
        .iter()
        .map(|s| s.data().iter().sum::<f64>() / s.rows() as f64)
        .collect()
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn linear_ground_truth_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs = grid(100, -1.0, 1.0);
    let truth = |x: f64| 0.8 * x + 0.1;
    let data = TrainingData {
        main: modality("y", &xs, truth, 0.05, &mut rng),
        aux: vec![],
    };
    let mut model = ModelState::init(ModelKind::Unimodal, &data, &arch(32), &mut rng).unwrap();
    let before = elbo(&model, &data, &mut rng, 20).unwrap();
    fit(&mut model, &data, &FitConfig::default()).unwrap();
    let after = elbo(&model, &data, &mut rng, 20).unwrap();
    assert!(after > before, "{after} <= {before}");
    let xq = grid(15, -0.9, 0.9);
    let mu = mean_prediction(&model, &data, &Array::column(&xq), 200, 1);
    let want: Vec<f64> = xq.iter().map(|&x| truth(x)).collect();
    let err = rmse(&mu, &want);
    assert!(err < 0.1, "rmse {err}");
}

#[test]
fn constant_zero_data_predicts_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = grid(12, -1.0, 1.0);
    let data = TrainingData {
        main: modality("y", &xs, |_| 0.0, 0.0, &mut rng),
        aux: vec![],
    };
    let mut model = ModelState::init(ModelKind::Unimodal, &data, &arch(16), &mut rng).unwrap();
    fit(&mut model, &data, &FitConfig::default()).unwrap();
    let mu = mean_prediction(&model, &data, &data.main.x, 200, 2);
    assert!(mu.iter().all(|m| m.abs() < 0.1), "{mu:?}");
}

#[test]
fn replicated_point_is_interpolated() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut xs = grid(8, -1.0, 1.0);
    xs.extend(std::iter::repeat(0.3).take(30));
    let f = |x: f64| (2.0 * x).sin();
    let data = TrainingData {
        main: modality("y", &xs, f, 0.01, &mut rng),
        aux: vec![],
    };
    let mut model = ModelState::init(ModelKind::Unimodal, &data, &arch(16), &mut rng).unwrap();
    fit(&mut model, &data, &FitConfig::default()).unwrap();
    let pred = predict(&model, &data, &Array::column(&[0.3]), 500, &mut rng).unwrap();
    let s = pred.samples[0].data();
    let m = s.iter().sum::<f64>() / s.len() as f64;
    let sd = (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt();
    let observed = (8..38).map(|i| data.main.y.get(i, 0)).sum::<f64>() / 30.0;
    assert!(
        (m - observed).abs() < 2.0 * sd.max(1e-12),
        "mean {m} vs {observed}, sd {sd}"
    );
}

/// log p(Y) = log E_{p(Φ)} p(Y | Φ), estimated by prior sampling with a
/// log-sum-exp and a delta-method standard error.
fn prior_mc_evidence(model: &ModelState, data: &TrainingData, draws: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    use mmbnn::bnn;
    use mmbnn::ndiff::Graph;
    let net = model.networks()[0];
    let logs: Vec<f64> = (0..draws)
        .map(|_| {
            let g = Graph::new();
            let phi = bnn::prior_sample(&net.spec, &g, rng);
            let z =
                conjlayer::design_matrix(&bnn::features(&net.spec, &phi, &g.constant(data.main.x.clone())).unwrap())
                    .unwrap();
            conjlayer::log_marginal_var(&net.prior, &z, &g.constant(data.main.y.clone()))
                .unwrap()
                .item()
        })
        .collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let n = draws as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mx + mean.ln(), (var / n).sqrt() / mean)
}

#[test]
fn elbo_never_exceeds_evidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = TrainingData {
        main: modality("y", &[-0.5, 0.1, 0.7], |x| x * x, 0.1, &mut rng),
        aux: vec![],
    };
    let tiny = Architecture {
        hidden: vec![2],
        activation: Activation::Tanh,
    };
    let mut model = ModelState::init(ModelKind::Unimodal, &data, &tiny, &mut rng).unwrap();
    fit(&mut model, &data, &FitConfig::default()).unwrap();
    let n = 4000;
    let vals: Vec<f64> = (0..n).map(|_| elbo(&model, &data, &mut rng, 1).unwrap()).collect();
    let m = vals.iter().sum::<f64>() / n as f64;
    let se = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
    let (evidence, ev_se) = prior_mc_evidence(&model, &data, 200_000, &mut rng);
    let slack = evidence - m;
    assert!(
        slack > -3.0 * (se * se + ev_se * ev_se).sqrt(),
        "elbo {m} ± {se}, evidence {evidence} ± {ev_se}"
    );
}

#[test]
fn masking_a_replicate_costs_more_than_masking_unique_rows() {
    // A masked cell enters the bound as −log p(y | rest). The second copy of
    // a replicated row is the most predictable cell, so hiding it gives the
    // lowest bound of all single-cell masks.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut xs = grid(10, -1.0, 1.0);
    xs.push(xs[4]);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut main_y: Vec<f64> = xs.iter().map(|&x| 0.7 * x - 0.2 + noise.sample(&mut rng)).collect();
    main_y[10] = main_y[4];
    let aux_y: Vec<f64> = xs.iter().map(|&x| -0.5 * x + noise.sample(&mut rng)).collect();
    let build = |drop: usize| {
        let keep: Vec<usize> = (0..xs.len()).filter(|&i| i != drop).collect();
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        TrainingData {
            main: ModalityData::new("main", Array::column(&pick(&xs)), Array::column(&pick(&main_y))).unwrap(),
            aux: vec![ModalityData::new("aux", Array::column(&xs), Array::column(&aux_y)).unwrap()],
        }
    };
    let full = build(usize::MAX);
    let mut model = ModelState::init(ModelKind::Joint, &full, &arch(16), &mut rng).unwrap();
    fit(&mut model, &full, &FitConfig::default()).unwrap();
    let avg = |data: &TrainingData| {
        let mut r = ChaCha8Rng::seed_from_u64(40);
        (0..400)
            .map(|_| elbo_joint(&model, data, &mut r, 1).unwrap())
            .sum::<f64>()
            / 400.0
    };
    let replicate = avg(&build(10));
    let others: Vec<f64> = (0..10).filter(|&i| i != 4).map(|i| avg(&build(i))).collect();
    assert!(
        others.iter().all(|&o| replicate < o),
        "replicate {replicate} vs unique rows {others:?}"
    );
}

#[test]
fn redundant_auxiliary_helps_the_layered_model() {
    // The auxiliary modality is the main function itself, observed on a
    // wider grid; held-out points lie outside the main training range.
    let f = |x: f64| (2.0 * x).sin() + 0.5 * x;
    let x_main = grid(20, -1.0, 1.0);
    let x_aux = grid(60, -2.0, 2.0);
    let held: Vec<f64> = grid(10, -1.9, -1.1).into_iter().chain(grid(10, 1.1, 1.9)).collect();
    let want: Vec<f64> = held.iter().map(|&x| f(x)).collect();
    let xq = Array::column(&held);
    let mut gains = vec![];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let data = TrainingData {
            main: modality("main", &x_main, f, 0.01, &mut rng),
            aux: vec![modality("copy", &x_aux, f, 0.01, &mut rng)],
        };
        let cfg = FitConfig {
            seed,
            ..FitConfig::default()
        };
        let mut errs = vec![];
        for kind in [ModelKind::Unimodal, ModelKind::Layered] {
            let mut model = ModelState::init(kind, &data, &arch(32), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            fit(&mut model, &data, &cfg).unwrap();
            errs.push(rmse(&mean_prediction(&model, &data, &xq, 200, seed), &want));
        }
        gains.push(errs[0] - errs[1]);
    }
    gains.sort_by(f64::total_cmp);
    assert!(gains[2] > 0.0, "uni − layered RMSE per seed: {gains:?}");
}
