use mmlab::bpm::{sample_orthant, strategy_predict, OrthantSampling, PosteriorKind, PosteriorSampler, Strategy};
use mmlab::config::ConfigFile;
use mmlab::deep_linear::{perturbation_bounds, project_to_sphere, UpdateRule, Flavour};
use mmlab::kernel::{arccos_h, arccos_kernel, gp_condition, min_norm_interpolate, GpPosterior, GramBundle, Kernel};
use mmlab::mlp::{margins, train_margin_projected, MarginFitConfig};
use mmlab::network::{Activation, Network};
use mmlab::numerics::{chol_logdet, frobenius_norm, gaussian_matrix, sign, spectral_norm_default, spectral_norm_exact, RngStream};
use mmlab::optim::{cubic_subproblem, gd_step, majorisation_gap, mirror_step, EuclideanMap, Majorisation, Quadratic, SmoothObjective};
use mmlab::pac_bayes::{kl_inverse_bound, realisable_bound};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

fn sphere(rng: &mut RngStream, m: usize, d: usize) -> DMatrix<f64> {
    project_to_sphere(&gaussian_matrix(rng, m, d, 1.0)).unwrap()
}

fn labels(rng: &mut RngStream, m: usize) -> DVector<f64> {
    DVector::from_fn(m, |_, _| if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
}

fn spd(rng: &mut RngStream, n: usize, ridge: f64) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, n, n, 1.0);
    &a * a.transpose() + DMatrix::identity(n, n) * ridge
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectral_at_most_frobenius(seed in any::<u64>(), r in 1usize..20, c in 1usize..20) {
        let m = gaussian_matrix(&mut RngStream::new(seed, 0), r, c, 1.0);
        let s = spectral_norm_default(&m).unwrap();
        prop_assert!(s <= frobenius_norm(&m).unwrap() * (1.0 + 1e-12));
        prop_assert!(spectral_norm_exact(&m) <= frobenius_norm(&m).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn spectral_norm_is_absolutely_homogeneous(seed in any::<u64>(), r in 1usize..12, c in 1usize..12, k in -50.0f64..50.0) {
        let m = gaussian_matrix(&mut RngStream::new(seed, 0), r, c, 1.0);
        let lhs = spectral_norm_exact(&(&m * k));
        let rhs = k.abs() * spectral_norm_exact(&m);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1e-300));
    }

    #[test]
    fn cholesky_reconstructs(seed in any::<u64>(), n in 1usize..25) {
        let a = spd(&mut RngStream::new(seed, 0), n, 1.0);
        let f = chol_logdet(&a, 0.0).unwrap();
        prop_assert!((f.reconstruct() - &a).norm() <= 1e-8 * a.norm());
        let ld: f64 = SymmetricEigen::new(a.clone()).eigenvalues.iter().map(|e| e.ln()).sum();
        prop_assert!((f.logdet() - ld).abs() <= 1e-8 * ld.abs().max(1.0));
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), id in any::<u64>(), coords in proptest::collection::vec(any::<u64>(), 0..4)) {
        let draw = |mut r: RngStream| (0..32).map(|_| r.normal().to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(draw(RngStream::new(seed, id)), draw(RngStream::new(seed, id)));
        let base = RngStream::new(seed, id);
        prop_assert_eq!(draw(base.substream(&coords)), draw(base.substream(&coords)));
    }

    #[test]
    fn majorisations_are_tangent_at_zero(seed in any::<u64>(), n in 1usize..8, lambda in 0.1f64..10.0) {
        let mut rng = RngStream::new(seed, 0);
        let q = Quadratic::new(spd(&mut rng, n, 0.1), DVector::from_fn(n, |_, _| rng.normal())).unwrap();
        let w = DVector::from_fn(n, |_, _| rng.normal());
        let zero = DVector::zeros(n);
        let map = EuclideanMap;
        for kind in [Majorisation::Euclidean(lambda), Majorisation::Cubic(lambda), Majorisation::Bregman(&map)] {
            prop_assert_eq!(majorisation_gap(&q, &w, &zero, &kind).unwrap(), (0.0, 0.0));
        }
    }

    #[test]
    fn euclidean_mirror_step_is_unit_gradient_step(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = RngStream::new(seed, 0);
        let q = Quadratic::new(spd(&mut rng, n, 0.1), DVector::from_fn(n, |_, _| rng.normal())).unwrap();
        let w = DVector::from_fn(n, |_, _| rng.normal());
        let a = mirror_step(&q, &EuclideanMap, &w).unwrap();
        let b = gd_step(&q, &w, 1.0).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_step_with_curvature_bound_descends(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = RngStream::new(seed, 0);
        let a = spd(&mut rng, n, 0.01);
        let lmax = SymmetricEigen::new(a.clone()).eigenvalues.max();
        let q = Quadratic::new(a, DVector::from_fn(n, |_, _| rng.normal())).unwrap();
        let w = DVector::from_fn(n, |_, _| 3.0 * rng.normal());
        let next = gd_step(&q, &w, lmax).unwrap();
        prop_assert!(q.value(&next) <= q.value(&w) + 1e-12);
    }

    #[test]
    fn cubic_subproblem_is_stationary(seed in any::<u64>(), n in 1usize..8, lambda in 0.05f64..20.0) {
        let mut rng = RngStream::new(seed, 0);
        let b = gaussian_matrix(&mut rng, n, n, 1.0);
        let h = (&b + b.transpose()) * 0.5;
        let g = DVector::from_fn(n, |_, _| rng.normal());
        let d = cubic_subproblem(&g, &h, lambda).unwrap();
        let residual = &g + &h * &d + &d * (0.5 * lambda * d.norm());
        prop_assert!(residual.norm() <= 1e-6, "residual {}", residual.norm());
    }

    #[test]
    fn networks_are_homogeneous_in_weights(
        seed in any::<u64>(),
        depth in 1usize..6,
        sigma in 0.1f64..4.0,
        act in prop_oneof![Just(Activation::Identity), Just(Activation::Relu), Just(Activation::ScaledRelu)],
    ) {
        let mut rng = RngStream::new(seed, 0);
        let widths: Vec<usize> = (0..=depth).map(|_| 1 + (rng.uniform() * 12.0) as usize).collect();
        let net = Network::init_rms_one(&widths, act, &mut rng).unwrap();
        let x = sphere(&mut rng, 5, widths[0]);
        let base = net.forward_batch(&x).unwrap();
        let scaled = net.scaled(sigma).forward_batch(&x).unwrap();
        let expect = &base * sigma.powi(depth as i32);
        let tol = if act == Activation::Identity { 1e-10 } else { 1e-9 };
        prop_assert!((scaled - &expect).norm() <= tol * expect.norm().max(1e-300));
    }

    #[test]
    fn first_order_bound_is_product_expansion(seed in any::<u64>(), depth in 2usize..4) {
        let mut rng = RngStream::new(seed, 0);
        let widths: Vec<usize> = (0..=depth).map(|_| 2 + (rng.uniform() * 6.0) as usize).collect();
        let net = Network::init_rms_one(&widths, Activation::Identity, &mut rng).unwrap();
        let delta: Vec<DMatrix<f64>> = net.weights().iter().map(|w| gaussian_matrix(&mut rng, w.nrows(), w.ncols(), 0.1)).collect();
        let x = sphere(&mut rng, 3, widths[0]);
        let r = perturbation_bounds(&net, &delta, &x).unwrap();
        let s = r.relative_sizes.clone();
        let (first, second) = if depth == 2 {
            (s[0] + s[1] + s[0] * s[1], s[0] * s[1])
        } else {
            let pairs = s[0] * s[1] + s[0] * s[2] + s[1] * s[2];
            let triple = s[0] * s[1] * s[2];
            (s[0] + s[1] + s[2] + pairs + triple, pairs + triple)
        };
        let scale = 3f64.sqrt() * r.output_scale;
        prop_assert!((r.first_order - scale * first).abs() <= 1e-12 * r.first_order);
        prop_assert!((r.second_order - scale * second).abs() <= 1e-12 * r.second_order);
    }

    #[test]
    fn normalised_margins_share_numerator(seed in any::<u64>(), depth in 1usize..5) {
        let mut rng = RngStream::new(seed, 0);
        let widths: Vec<usize> = (0..depth).map(|_| 2 + (rng.uniform() * 10.0) as usize).chain([1]).collect();
        let net = Network::init_rms_one(&widths, Activation::ScaledRelu, &mut rng).unwrap();
        let x = sphere(&mut rng, 6, widths[0]);
        let y: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = margins(&net, &x, &y).unwrap();
        let a = r.spectral * r.spectral_norms.iter().product::<f64>();
        let b = r.frobenius * r.rms_norms.iter().product::<f64>();
        let c = r.raw / (widths[0] as f64).sqrt();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        prop_assert!((a - c).abs() <= 1e-10 * c.abs().max(1e-300));
        for (s, rms) in r.spectral_norms.iter().zip(&r.rms_norms) {
            prop_assert!(*rms <= s * (1.0 + 1e-6));
        }
    }

    #[test]
    fn arccos_map_is_monotone_with_fixed_point(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(arccos_h(lo) <= arccos_h(hi));
        prop_assert!((arccos_h(1.0) - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn arccos_kernel_has_unit_diagonal(seed in any::<u64>(), d in 2usize..20, depth in 1usize..6) {
        let x = sphere(&mut RngStream::new(seed, 0), 1, d);
        let row: Vec<f64> = x.row(0).iter().copied().collect();
        prop_assert!((arccos_kernel(&row, &row, depth).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn grams_factorise_and_posteriors_are_psd(seed in any::<u64>(), m in 1usize..64, d in 2usize..12, gaussian in any::<bool>()) {
        let mut rng = RngStream::new(seed, 0);
        let kernel = if gaussian { Kernel::Gaussian { sigma: 1.0 } } else { Kernel::ArcCos { depth: 2 } };
        let x = sphere(&mut rng, m, d);
        let gram = GramBundle::new(kernel, x, None).unwrap();
        let y = labels(&mut rng, m);
        let xq = sphere(&mut rng, 6, d);
        let (mean, cov) = gp_condition(&GpPosterior::new(gram.clone(), y.clone(), 1.0).unwrap(), &xq).unwrap();
        let min_eig = SymmetricEigen::new((&cov + cov.transpose()) * 0.5).eigenvalues.min();
        prop_assert!(min_eig >= -1e-8, "min eigenvalue {min_eig}");
        let interp = min_norm_interpolate(&gram, &y).unwrap().predict(&xq).unwrap();
        prop_assert!((interp - mean).amax() <= 1e-8 * (1.0 + y.amax()));
    }

    #[test]
    fn kl_inverse_is_monotone(t in 0.0f64..0.5, dt in 0.0f64..0.3, cap in 0.0f64..3.0, dc in 0.0f64..1.0) {
        let base = kl_inverse_bound(t, cap);
        prop_assert!(base >= t - 1e-12);
        prop_assert!(kl_inverse_bound(t + dt, cap) >= base - 1e-9);
        prop_assert!(kl_inverse_bound(t, cap + dc) >= base - 1e-9);
        prop_assert!((kl_inverse_bound(0.0, cap) - (1.0 - (-cap).exp())).abs() <= 1e-9);
    }

    #[test]
    fn realisable_bound_orders_with_kl_and_m(kl in 0.0f64..50.0, dkl in 0.01f64..10.0, m in 2usize..1000, dm in 1usize..1000, delta in 0.001f64..0.5) {
        let b = realisable_bound(kl, m, delta).unwrap();
        prop_assert!(realisable_bound(kl + dkl, m, delta).unwrap() >= b);
        prop_assert!(realisable_bound(kl, m + dm, delta).unwrap() <= b);
    }

    #[test]
    fn posterior_samples_lie_in_label_orthant(
        seed in any::<u64>(),
        m in 1usize..10,
        kind in prop_oneof![Just(PosteriorKind::ExactOrthant), Just(PosteriorKind::Spherised)],
        method in prop_oneof![Just(OrthantSampling::Auto), Just(OrthantSampling::CoordinateGibbs)],
    ) {
        let mut rng = RngStream::new(seed, 0);
        let x = sphere(&mut rng, m, 4);
        let y = labels(&mut rng, m);
        let gram = GramBundle::new(Kernel::ArcCos { depth: 2 }, x, None).unwrap();
        let sampler = PosteriorSampler::new(kind, gram, y.clone()).unwrap();
        let s = sample_orthant(&sampler, 50, &rng.substream(&[1]), method).unwrap();
        prop_assert_eq!(s.samples.shape(), (m, 50));
        for col in s.samples.column_iter() {
            for (f, yi) in col.iter().zip(y.iter()) {
                prop_assert_eq!(sign(*f), *yi);
            }
        }
    }

    #[test]
    fn spherised_bpm_is_interpolator_sign(seed in any::<u64>(), m in 2usize..30, d in 2usize..10) {
        let mut rng = RngStream::new(seed, 0);
        let x = sphere(&mut rng, m, d);
        let y = labels(&mut rng, m);
        let xq = sphere(&mut rng, 20, d);
        let gram = GramBundle::new(Kernel::ArcCos { depth: 3 }, x, None).unwrap();
        let interp = min_norm_interpolate(&gram, &y).unwrap().predict(&xq).unwrap();
        let sampler = PosteriorSampler::new(PosteriorKind::Spherised, gram, y).unwrap();
        let bpm = strategy_predict(&sampler, &xq, Strategy::Bpm, &rng.substream(&[1])).unwrap();
        let expected: Vec<f64> = interp.iter().map(|v| sign(*v)).collect();
        prop_assert_eq!(bpm, expected);
    }

    #[test]
    fn config_text_round_trips(
        entries in proptest::collection::btree_map("[a-z][a-z0-9_]{0,8}", "[A-Za-z0-9_.,/ -]{0,16}", 0..6),
        section in "[a-z][a-z-]{0,10}",
    ) {
        let mut text = format!("# generated\n[{section}]\n");
        for (k, v) in &entries {
            text.push_str(&format!("  {k} =  {v}  # note\n"));
        }
        let cfg = ConfigFile::parse(&text).unwrap();
        prop_assert!(cfg.has_section(&section));
        for (k, v) in &entries {
            prop_assert_eq!(cfg.raw(&section, k), Some(v.trim()));
        }
        let doubled = format!("{text}{}", entries.keys().next().map(|k| format!("{k} = 1\n")).unwrap_or_default());
        prop_assert_eq!(ConfigFile::parse(&doubled).is_err(), !entries.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn projected_training_keeps_layer_radii(seed in any::<u64>(), depth in 1usize..4, radius in 0.5f64..3.0) {
        let mut rng = RngStream::new(seed, 0);
        let widths: Vec<usize> = (0..depth).map(|_| 3 + (rng.uniform() * 8.0) as usize).chain([1]).collect();
        let net = Network::init_rms_one(&widths, Activation::ScaledRelu, &mut rng).unwrap();
        let x = sphere(&mut rng, 8, widths[0]);
        let y: Vec<f64> = (0..8).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let cfg = MarginFitConfig {
            gamma: 1.0,
            steps: 5,
            rule: UpdateRule::fixed(Flavour::Conditioned, 0.1),
            radii: Some(vec![radius; depth]),
            fit_fraction: 0.5,
            anneal: false,
        };
        let fit = train_margin_projected(&net, &x, &y, &cfg).unwrap();
        for w in fit.net.weights() {
            prop_assert!((frobenius_norm(w).unwrap() - radius).abs() <= 1e-12 * radius);
        }
    }
}
