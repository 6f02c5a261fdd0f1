use recall_core::activation::{build_paper_activation, Activation};
use recall_core::embed::embeddings_for;
use recall_core::quadrature::GaussHermite;
use recall_core::rng::{rng_from_seed, Gaussian};
use recall_core::taskgen::{build_task, sample_dataset, sample_permutation, Permutation, TaskConfig};

fn within_sigmas(observed: f64, expected: f64, sd: f64, k: f64) -> bool {
    (observed - expected).abs() <= k * sd
}

#[test]
fn singleton_token_frequencies_are_uniform() {
    let v = 10;
    let n = 100_000;
    let cfg = TaskConfig::new(v, 1, n, 1, 0).with_seed(7);
    let data = sample_dataset(&cfg, &Permutation::identity(v), 99).unwrap();
    let mut counts = vec![0usize; v];
    for ex in &data.examples {
        counts[ex.tokens[0] as usize] += 1;
    }
    let p = 1.0 / v as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for c in counts {
        assert!(within_sigmas(c as f64 / n as f64, p, se, 5.0), "frequency {c}");
    }
}

#[test]
fn informative_position_is_uniform() {
    let l = 7;
    let n = 70_000;
    let cfg = TaskConfig::new(5, l, n, 1, 0).with_seed(3);
    let data = build_task(&cfg, false).unwrap();
    let mut counts = vec![0f64; l];
    for ex in &data.examples {
        counts[ex.informative_pos] += 1.0;
    }
    let e = n as f64 / l as f64;
    let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
    // 6 degrees of freedom, 0.999 quantile is 22.46
    assert!(chi2 < 22.46, "chi2 = {chi2}");
}

#[test]
fn token_and_label_are_jointly_diagonal_under_identity() {
    let v = 6;
    let n = 60_000;
    let cfg = TaskConfig::new(v, 1, n, 1, 0).with_seed(11);
    let data = build_task(&cfg, true).unwrap();
    let mut joint = vec![vec![0usize; v]; v];
    for ex in &data.examples {
        joint[ex.tokens[0] as usize][ex.label as usize] += 1;
    }
    let p = 1.0 / v as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for (a, row) in joint.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            if a == b {
                assert!(within_sigmas(c as f64 / n as f64, p, se, 5.0));
            } else {
                assert_eq!(c, 0);
            }
        }
    }
}

#[test]
fn labels_follow_the_permutation() {
    let cfg = TaskConfig::new(50, 9, 3000, 1, 0).with_seed(5);
    let data = build_task(&cfg, false).unwrap();
    for ex in &data.examples {
        assert_eq!(ex.label, data.perm.apply(ex.tokens[ex.informative_pos]));
        assert!(ex.tokens.iter().all(|&t| (t as usize) < 50));
    }
}

#[test]
fn permutations_are_bijections() {
    let mut rng = rng_from_seed(1);
    for v in [2, 3, 17, 256] {
        let p = sample_permutation(v, &mut rng).unwrap();
        let mut seen = vec![false; v];
        for &t in p.mapping() {
            assert!(!seen[t as usize]);
            seen[t as usize] = true;
        }
        assert_eq!(p.compose(&p.inverse()), Permutation::identity(v));
    }
}

#[test]
fn embedding_column_norms_concentrate_at_one() {
    let (v, d) = (400, 25);
    let emb = embeddings_for(&TaskConfig::new(v, 4, 10, d, 0).with_seed(8)).unwrap();
    for z in [emb.z_in(), emb.z_out()] {
        let mean_sq: f64 = z.columns().into_iter().map(|c| c.dot(&c)).sum::<f64>() / v as f64;
        // each squared norm has mean 1 and variance 2/d
        assert!((mean_sq - 1.0).abs() <= 5.0 * (2.0 / (v * d) as f64).sqrt(), "{mean_sq}");
    }
}

#[test]
fn embedding_entry_variance_is_inverse_dimension() {
    let (v, d) = (300, 16);
    let emb = embeddings_for(&TaskConfig::new(v, 4, 10, d, 0).with_seed(21)).unwrap();
    let z = emb.z_in();
    let n = (v * d) as f64;
    let mean = z.sum() / n;
    let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let target = 1.0 / d as f64;
    // sample variance of Gaussians has sd sigma² sqrt(2/(n-1))
    assert!(within_sigmas(var, target, target * (2.0 / (n - 1.0)).sqrt(), 5.0), "{var}");
}

#[test]
fn trigger_eos_inner_product_has_variance_inverse_d() {
    let d = 20;
    let seeds = 1000;
    let dots: Vec<f64> = (0..seeds)
        .map(|s| {
            let emb = embeddings_for(&TaskConfig::new(4, 2, 1, d, 0).with_seed(s)).unwrap();
            emb.z_trig().dot(emb.z_eos())
        })
        .collect();
    let n = seeds as f64;
    let mean = dots.iter().sum::<f64>() / n;
    let var = dots.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let target = 1.0 / d as f64;
    assert!(within_sigmas(mean, 0.0, (target / n).sqrt(), 5.0), "{mean}");
    // the product of two independent N(0, 1/d) vectors summed over d has kurtosis 3 + 6/d
    let var_sd = target * ((2.0 + 6.0 / d as f64) / n).sqrt();
    assert!(within_sigmas(var, target, var_sd, 5.0), "{var}");
}

#[test]
fn mlp_input_weights_have_unit_variance() {
    let emb = embeddings_for(&TaskConfig::new(8, 2, 1, 10, 200).with_seed(4)).unwrap();
    let w = emb.w_in().unwrap();
    assert_eq!(w.dim(), (200, 10));
    let n = w.len() as f64;
    let var = w.iter().map(|x| x * x).sum::<f64>() / n;
    assert!(within_sigmas(var, 1.0, (2.0 / n).sqrt(), 5.0), "{var}");
}

#[test]
fn paper_activation_projects_onto_h2() {
    let act = build_paper_activation();
    let gh = GaussHermite::new(12).unwrap();
    let h2 = |t: f64| t * t - 1.0;
    let h3 = |t: f64| t * t * t - 3.0 * t;
    assert!((gh.expect_1d(1.0, |t| act.eval(t) * h2(t)) - 1.4).abs() < 1e-12);
    assert!((gh.expect_1d(1.0, |t| act.eval(t) * h3(t)) - 1.8).abs() < 1e-12);
    assert!(gh.expect_1d(1.0, |t| act.eval(t) * t).abs() < 1e-12);

    let mut rng = rng_from_seed(77);
    let mut g = Gaussian::new();
    let n = 200_000;
    let samples: Vec<f64> = (0..n).map(|_| {
        let z = g.sample(&mut rng);
        act.eval(z) * h2(z)
    }).collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!(within_sigmas(mean, 1.4, sd / (n as f64).sqrt(), 4.0), "{mean}");
}

#[test]
fn activation_derivatives_match_finite_differences() {
    let act = build_paper_activation();
    let mut rng = rng_from_seed(5);
    let mut g = Gaussian::new();
    let h = 1e-5;
    for _ in 0..50 {
        let t = 2.0 * g.sample(&mut rng);
        let fd1 = (act.eval(t + h) - act.eval(t - h)) / (2.0 * h);
        let fd2 = (act.eval_d1(t + h) - act.eval_d1(t - h)) / (2.0 * h);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
        assert!(rel(act.eval_d1(t), fd1) < 1e-6);
        assert!(rel(act.eval_d2(t), fd2) < 1e-6);
    }
}

#[test]
fn hermite_expansion_of_cube() {
    // t^3 = h3 + 3 h1
    let cube = Activation::from_monomial(&[0.0, 0.0, 0.0, 1.0]).unwrap();
    let gh = GaussHermite::new(8).unwrap();
    let proj1 = gh.expect_1d(1.0, |t| cube.eval(t) * t);
    assert!((proj1 - 3.0).abs() < 1e-12);
    assert!((cube.hermite_projection(1) - proj1).abs() < 1e-12);
}
