use adagraph::domain_graph::mix_param_sets;
use adagraph::gbn::batch_stats;
use adagraph::network::{entropy, softmax};
use adagraph::refinement::blend_stats;
use adagraph::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params_strategy(channels: usize) -> impl Strategy<Value = ParamSet> {
    let field = move |lo: f64, hi: f64| prop::collection::vec(lo..hi, channels);
    (field(-2.0, 2.0), field(0.01, 3.0), field(0.2, 2.0), field(-1.0, 1.0)).prop_map(|(mu, var, gamma, beta)| {
        ParamSet {
            layers: vec![BnParams { mu, var, gamma, beta }],
        }
    })
}

fn node_strategy(dim: usize) -> impl Strategy<Value = (Vec<f64>, ParamSet)> {
    (prop::collection::vec(0.0..1.0f64, dim), params_strategy(3))
}

fn build_graph(sigma: f64, nodes: &[(Vec<f64>, ParamSet)], order: &[usize]) -> DomainGraph {
    let dim = nodes[0].0.len();
    let mut g = DomainGraph::new(dim, KernelConfig::new(sigma).unwrap()).unwrap();
    for &i in order {
        let role = if i == 0 { NodeRole::Source } else { NodeRole::Auxiliary };
        g.add_node(DomainId(i as u32), Metadata::new(nodes[i].0.clone()).unwrap(), role)
            .unwrap();
        g.assign_params(DomainId(i as u32), nodes[i].1.clone()).unwrap();
    }
    g
}

fn random_batch(seed: u64, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, scale).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn propagation_ignores_insertion_order(
        nodes in prop::collection::vec(node_strategy(2), 1..12),
        target in prop::collection::vec(0.0..1.0f64, 2),
        sigma in 0.01..1.0f64,
        shuffle_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let ascending: Vec<usize> = (0..nodes.len()).collect();
        let mut shuffled = ascending.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let t = DomainId(nodes.len() as u32);
        let mut a = build_graph(sigma, &nodes, &ascending);
        let mut b = build_graph(sigma, &nodes, &shuffled);
        a.add_virtual_node(t, Metadata::new(target.clone()).unwrap()).unwrap();
        b.add_virtual_node(t, Metadata::new(target).unwrap()).unwrap();
        prop_assert_eq!(a.propagate_params(t).unwrap(), b.propagate_params(t).unwrap());
    }

    #[test]
    fn weights_form_a_distribution(
        nodes in prop::collection::vec(node_strategy(3), 1..15),
        target in prop::collection::vec(-1.0..2.0f64, 3),
        sigma in 1e-4..10.0f64,
    ) {
        let order: Vec<usize> = (0..nodes.len()).collect();
        let mut g = build_graph(sigma, &nodes, &order);
        let t = g.next_free_id();
        g.add_virtual_node(t, Metadata::new(target).unwrap()).unwrap();
        let w = g.node_weights(t).unwrap();
        prop_assert_eq!(w.len(), nodes.len());
        prop_assert!(w.iter().all(|(_, w)| *w >= 0.0 && w.is_finite()));
        prop_assert!((w.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn propagated_params_stay_in_the_envelope(
        nodes in prop::collection::vec(node_strategy(2), 1..10),
        target in prop::collection::vec(0.0..1.0f64, 2),
        sigma in 0.01..1.0f64,
    ) {
        let order: Vec<usize> = (0..nodes.len()).collect();
        let mut g = build_graph(sigma, &nodes, &order);
        let t = g.next_free_id();
        g.add_virtual_node(t, Metadata::new(target).unwrap()).unwrap();
        let p = g.propagate_params(t).unwrap();
        for (f, got) in p.layers[0].fields().into_iter().enumerate() {
            for (c, v) in got.iter().enumerate() {
                let vals = nodes.iter().map(|(_, s)| s.layers[0].fields()[f][c]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= *v && *v <= hi);
            }
        }
        prop_assert!(p.layers[0].var.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn identical_params_are_a_fixed_point(
        metas in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 2), 1..10),
        shared in params_strategy(3),
        target in prop::collection::vec(0.0..1.0f64, 2),
    ) {
        let nodes: Vec<_> = metas.into_iter().map(|m| (m, shared.clone())).collect();
        let order: Vec<usize> = (0..nodes.len()).collect();
        let mut g = build_graph(0.1, &nodes, &order);
        let t = g.next_free_id();
        g.add_virtual_node(t, Metadata::new(target).unwrap()).unwrap();
        prop_assert_eq!(g.propagate_params(t).unwrap(), shared);
    }

    #[test]
    fn mixing_is_linear_in_one_hot_weights(sets in prop::collection::vec(params_strategy(4), 2..6), pick in any::<prop::sample::Index>()) {
        let k = pick.index(sets.len());
        let mut w = vec![0.0; sets.len()];
        w[k] = 1.0;
        let refs: Vec<&ParamSet> = sets.iter().collect();
        prop_assert_eq!(mix_param_sets(&w, &refs).unwrap(), sets[k].clone());
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..8, cols in 2usize..6, scale in 0.1..50.0f64) {
        let p = softmax(&random_batch(seed, rows, cols, scale));
        for r in p.rows() {
            prop_assert!(r.iter().all(|v| *v > 0.0 || scale > 30.0));
            prop_assert!(r.iter().all(|v| *v >= 0.0));
            prop_assert!((r.sum() - 1.0).abs() <= 1e-9);
        }
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (cols as f64).ln() + 1e-12);
    }

    #[test]
    fn train_mode_output_is_standardized(seed in any::<u64>(), rows in 4usize..40, cols in 1usize..6, std in 0.5..5.0f64, shift in -10.0..10.0f64) {
        let x = random_batch(seed, rows, cols, std) + shift;
        let mut s = GbnState::new(cols, 1e-5, 0.1).unwrap();
        s.insert(DomainId(0), BnParams::identity(cols)).unwrap();
        let y = s.forward_plain(x.view(), DomainId(0), BnMode::Train).unwrap();
        let (mu, var) = batch_stats(y.view()).unwrap();
        let (_, var_x) = batch_stats(x.view()).unwrap();
        for c in 0..cols {
            prop_assert!(mu[c].abs() <= 1e-9);
            // Exact value with the stabilizer: var_x / (var_x + eps).
            prop_assert!((var[c] - var_x[c] / (var_x[c] + 1e-5)).abs() <= 1e-9);
        }
    }

    #[test]
    fn running_stats_match_the_geometric_form(alpha in 0.01..1.0f64, m in 2usize..64, k in 1i32..40, mu0 in -3.0..3.0f64, target in -3.0..3.0f64, var0 in 0.0..4.0f64, var_m in 0.0..4.0f64) {
        let (mut mu, mut var) = (vec![mu0], vec![var0]);
        for _ in 0..k {
            blend_stats(&mut mu, &mut var, &[target], &[var_m], alpha, m).unwrap();
        }
        let keep = (1.0 - alpha).powi(k);
        let bessel = m as f64 / (m as f64 - 1.0);
        prop_assert!((mu[0] - (keep * mu0 + (1.0 - keep) * target)).abs() <= 1e-12);
        prop_assert!((var[0] - (keep * var0 + (1.0 - keep) * bessel * var_m)).abs() <= 1e-12);
    }

    #[test]
    fn single_known_node_graph_forward_is_plain(seed in any::<u64>(), rows in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(3, &[5, 4], 3, DomainId(7), 1e-5, 0.1, &mut rng).unwrap();
        let mut g = DomainGraph::new(1, KernelConfig::default()).unwrap();
        g.add_node(DomainId(7), Metadata::new(vec![0.3]).unwrap(), NodeRole::Source).unwrap();
        let x = random_batch(seed ^ 1, rows, 3, 1.0);
        let plain = net.predict(x.view(), DomainId(7), None).unwrap();
        let graph = net.predict(x.view(), DomainId(7), Some(&g)).unwrap();
        prop_assert_eq!(plain, graph);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn regressed_params_are_continuous_in_metadata(
        nodes in prop::collection::vec(node_strategy(1), 2..8),
        m in 0.0..1.0f64,
    ) {
        let order: Vec<usize> = (0..nodes.len()).collect();
        let base = build_graph(0.1, &nodes, &order);
        let at = |m: f64| {
            let mut g = base.clone();
            let t = g.next_free_id();
            g.add_virtual_node(t, Metadata::new(vec![m]).unwrap()).unwrap();
            g.propagate_params(t).unwrap()
        };
        let p0 = at(m);
        // The kernel's log-derivative is bounded by |dm| / sigma per weight,
        // so a parameter moves at most width * 2 * h / sigma.
        let width = 5.0;
        for k in [8, 12, 16, 20] {
            let h = 0.5f64.powi(k);
            let d = at(m + h).max_abs_diff(&p0);
            prop_assert!(d <= width * 2.0 * h / 0.1 * 2.0 + 1e-12, "h={h}: {d}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn virtual_target_plain_forward_matches_graph_forward(
        seed in any::<u64>(),
        metas in prop::collection::vec(0.0..1.0f64, 2..6),
        target in 0.0..1.0f64,
        sigma in 0.01..1.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(2, &[4, 3], 2, DomainId(0), 1e-5, 0.1, &mut rng).unwrap();
        let mut g = DomainGraph::new(1, KernelConfig::new(sigma).unwrap()).unwrap();
        for (i, m) in metas.iter().enumerate() {
            let id = DomainId(i as u32);
            let role = if i == 0 { NodeRole::Source } else { NodeRole::Auxiliary };
            g.add_node(id, Metadata::new(vec![*m]).unwrap(), role).unwrap();
            let x = random_batch(seed.wrapping_add(i as u64), 8, 2, 1.0 + i as f64);
            if i > 0 {
                net.clone_domain(DomainId(0), id).unwrap();
            }
            // Distinct statistics per domain, then perturbed scale and bias.
            net.forward(x.view(), id, None, BnMode::Train).unwrap();
            let mut p = net.param_set(id).unwrap();
            for layer in &mut p.layers {
                for (k, v) in layer.gamma.iter_mut().enumerate() {
                    *v += 0.1 * (i + k) as f64;
                }
                for (k, v) in layer.beta.iter_mut().enumerate() {
                    *v -= 0.05 * (i * k) as f64;
                }
            }
            net.set_param_set(id, &p).unwrap();
            g.assign_params(id, p).unwrap();
        }
        let model = predict_from_metadata(&g, &net, Metadata::new(vec![target]).unwrap()).unwrap();
        let x = random_batch(seed ^ 7, 5, 2, 1.0);
        let plain = model.net.predict(x.view(), model.target, None).unwrap();
        let graph = model.predict(x.view()).unwrap();
        prop_assert_eq!(plain, graph);
    }
}
