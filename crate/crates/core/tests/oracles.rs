use std::collections::BTreeMap;

use adagraph::benchmark::*;
use adagraph::network::{entropy, stack_all, ForwardPass};
use adagraph::prediction::{predict_with_mixture, train_metadata_classifier};
use adagraph::refinement::refine_scale_bias;
use adagraph::training::{stage2_graph, stage2_schedule, stage2_with_schedule};
use adagraph::*;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn small_spec(n_domains: usize) -> DomainFamilySpec {
    DomainFamilySpec {
        n_domains,
        samples_per_domain: 96,
        ..DomainFamilySpec::default()
    }
}

fn small_cfg() -> ProtocolConfig {
    let mut cfg = ProtocolConfig::default();
    cfg.hidden = vec![8, 8];
    cfg.train.epochs_stage1 = 5;
    cfg
}

fn gaussian(seed: u64, rows: usize, mean: &[f64], std: f64, domain: DomainId, label: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, std).unwrap();
    (0..rows)
        .map(|_| Sample::labeled(mean.iter().map(|m| m + n.sample(&mut rng)).collect(), label, domain))
        .collect()
}

fn two_class(seed: u64, rows: usize, shift: f64, domain: DomainId) -> Vec<Sample> {
    let mut a = gaussian(seed, rows / 2, &[-1.5 + shift, shift], 0.5, domain, 0);
    a.extend(gaussian(seed + 1, rows - rows / 2, &[1.5 + shift, shift], 0.5, domain, 1));
    a
}

fn net(seed: u64, domain: DomainId) -> Network {
    Network::new(2, &[6, 5], 2, domain, 1e-5, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn train_pass(net: &Network, x: &Array2<f64>, cond: Conditioning<'_>) -> (Network, ForwardPass) {
    let mut n = net.clone();
    let p = n.forward_pass(x.view(), cond, BnMode::Train).unwrap();
    (n, p)
}

/// Graph of `k` known nodes, all at the same metadata, each with a copy of
/// the source entry.
fn coincident_graph(n: &mut Network, k: u32) -> DomainGraph {
    let mut g = DomainGraph::new(1, KernelConfig::default()).unwrap();
    for i in 0..k {
        let id = DomainId(i);
        let role = if i == 0 { NodeRole::Source } else { NodeRole::Auxiliary };
        g.add_node(id, Metadata::new(vec![0.5]).unwrap(), role).unwrap();
        if i > 0 {
            n.clone_domain(DomainId(0), id).unwrap();
        }
    }
    g
}

#[test]
fn equal_weights_spread_gradients_evenly() {
    let k = 4u32;
    let mut n = net(3, DomainId(0));
    let g = coincident_graph(&mut n, k);
    let x = stack_all(&two_class(1, 12, 0.0, DomainId(0)));
    let (gn, gpass) = train_pass(&n, &x, Conditioning::Graph(DomainId(2), &g));
    let graph_grads = gn.backward(&gpass, &Loss::Entropy, 1.0).unwrap();
    let (pn, ppass) = train_pass(&n, &x, Conditioning::Plain(DomainId(2)));
    let plain_grads = pn.backward(&ppass, &Loss::Entropy, 1.0).unwrap();
    for l in 0..2 {
        assert_eq!(graph_grads.scale_bias[l].len(), k as usize);
        let whole = &plain_grads.scale_bias[l][&DomainId(2)];
        for part in graph_grads.scale_bias[l].values() {
            let pairs = part.gamma.iter().zip(&whole.gamma).chain(part.beta.iter().zip(&whole.beta));
            for (a, b) in pairs {
                assert!((a * k as f64 - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} * {k} vs {b}");
            }
        }
    }
}

fn stage2_fixture(
    n_aux: u32,
    shift_of: impl Fn(u32) -> f64,
) -> (Network, DomainGraph, Vec<Sample>, BTreeMap<DomainId, Vec<Sample>>, TrainConfig) {
    let cfg = TrainConfig {
        epochs_stage1: 3,
        epochs_stage2: 2,
        ..TrainConfig::default()
    };
    let source_data = two_class(10, 96, 0.0, DomainId(0));
    let mut n = net(4, DomainId(0));
    adagraph::training::stage1_source(&mut n, DomainId(0), &source_data, &cfg, &mut TrainLog::default()).unwrap();
    let mut g = DomainGraph::new(1, KernelConfig::default()).unwrap();
    g.add_node(DomainId(0), Metadata::new(vec![0.0]).unwrap(), NodeRole::Source).unwrap();
    let mut aux = BTreeMap::new();
    for i in 1..=n_aux {
        let id = DomainId(i);
        g.add_node(id, Metadata::new(vec![i as f64 / 10.0]).unwrap(), NodeRole::Auxiliary).unwrap();
        aux.insert(id, two_class(100 + u64::from(i), 96, shift_of(i), id));
    }
    (n, g, source_data, aux, cfg)
}

#[test]
fn identical_distributions_give_matching_statistics() {
    let (mut n, mut g, src, aux, cfg) = stage2_fixture(3, |_| 0.0);
    let mode = Stage2Mode {
        train_scale_bias: false,
        graph_forward: false,
    };
    stage2_graph(&mut n, &mut g, DomainId(0), &src, &aux, &cfg, mode, &mut TrainLog::default()).unwrap();
    for (d, samples) in &aux {
        let pass = n.eval_pass(stack_all(samples).view(), Conditioning::Plain(*d)).unwrap();
        let h = pass.pre_norm(0);
        let rows = h.nrows() as f64;
        let entry = n.gbn_layers()[0].entry(*d).unwrap();
        for c in 0..h.ncols() {
            let col = h.column(c);
            let mean = col.sum() / rows;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
            // Stationary spread of an exponential average of batch means.
            let m = cfg.gbn_momentum;
            let se = (m / (2.0 - m) * var / cfg.batch_size as f64).sqrt();
            assert!((entry.mu[c] - mean).abs() <= 3.0 * se, "{d} ch{c}: {} vs {mean} (se {se})", entry.mu[c]);
        }
    }
}

#[test]
fn statistics_of_other_domains_ignore_a_removed_domain() {
    let (n, g, src, aux, cfg) = stage2_fixture(4, |i| i as f64 * 0.3);
    let removed = DomainId(2);
    for mode in [
        Stage2Mode {
            train_scale_bias: false,
            graph_forward: false,
        },
        Stage2Mode::FULL,
    ] {
        let schedule = stage2_schedule(DomainId(0), src.len(), aux.iter().map(|(d, s)| (*d, s.len())), &cfg).unwrap();
        let (mut full_net, mut full_graph) = (n.clone(), g.clone());
        stage2_with_schedule(&mut full_net, &mut full_graph, DomainId(0), &src, &aux, &cfg, mode, &schedule, &mut TrainLog::default()).unwrap();

        let mut fewer = aux.clone();
        fewer.remove(&removed);
        let mut small_graph = DomainGraph::new(1, KernelConfig::default()).unwrap();
        for node in g.nodes().filter(|n| n.id != removed) {
            small_graph.add_node(node.id, node.metadata.clone(), node.role).unwrap();
        }
        let mut small_net = n.clone();
        let trimmed = schedule.without(removed);
        stage2_with_schedule(&mut small_net, &mut small_graph, DomainId(0), &src, &fewer, &cfg, mode, &trimmed, &mut TrainLog::default()).unwrap();

        // The first layer's input never depends on scale or bias, so its
        // statistics are local even when scale and bias are trained.
        let layers = if mode.train_scale_bias { 1 } else { 2 };
        for d in small_graph.known_ids() {
            for l in 0..layers {
                let a = full_net.gbn_layers()[l].entry(d).unwrap();
                let b = small_net.gbn_layers()[l].entry(d).unwrap();
                assert_eq!((&a.mu, &a.var), (&b.mu, &b.var), "{d} layer {l} {mode:?}");
            }
        }
    }
}

#[test]
fn dominant_neighbor_sets_the_regressed_params() {
    let mut g = DomainGraph::new(2, KernelConfig::new(1e-4).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut sets = Vec::new();
    for i in 0..6u32 {
        let role = if i == 0 { NodeRole::Source } else { NodeRole::Auxiliary };
        let m = vec![i as f64 * 0.2, 0.5];
        g.add_node(DomainId(i), Metadata::new(m).unwrap(), role).unwrap();
        let layer = BnParams {
            mu: (0..3).map(|_| n.sample(&mut rng)).collect(),
            var: (0..3).map(|_| n.sample(&mut rng).abs() + 0.1).collect(),
            gamma: (0..3).map(|_| n.sample(&mut rng)).collect(),
            beta: (0..3).map(|_| n.sample(&mut rng)).collect(),
        };
        let p = ParamSet { layers: vec![layer] };
        g.assign_params(DomainId(i), p.clone()).unwrap();
        sets.push(p);
    }
    g.add_virtual_node(DomainId(10), Metadata::new(vec![0.61, 0.5]).unwrap()).unwrap();
    let got = g.propagate_params(DomainId(10)).unwrap();
    assert!(got.max_abs_diff(&sets[3]) <= 1e-9);
}

#[test]
fn domain_classifier_separates_distinct_domains_only() {
    let cfg = TrainConfig {
        epochs_stage1: 10,
        ..TrainConfig::default()
    };
    let eval = |data: &BTreeMap<DomainId, Vec<Sample>>| {
        let clf = train_metadata_classifier(data, &[8, 8], &cfg).unwrap();
        let (mut hits, mut total) = (0, 0);
        for (class, samples) in data.values().enumerate() {
            let p = clf.probabilities(stack_all(samples).view()).unwrap();
            for row in p.rows() {
                hits += usize::from(adagraph::refinement::argmax(row) == class);
                total += 1;
            }
        }
        hits as f64 / total as f64
    };
    let separable: BTreeMap<_, _> = (0..3u32)
        .map(|i| (DomainId(i), gaussian(u64::from(i), 120, &[4.0 * i as f64, 0.0], 0.5, DomainId(i), 0)))
        .collect();
    assert!(eval(&separable) >= 0.9);
    let identical: BTreeMap<_, _> = (0..2u32)
        .map(|i| (DomainId(i), gaussian(50 + u64::from(i), 400, &[0.0, 0.0], 1.0, DomainId(i), 0)))
        .collect();
    let acc = eval(&identical);
    assert!((acc - 0.5).abs() <= 0.1, "accuracy on indistinguishable domains: {acc}");
}

#[test]
fn one_hot_mixture_reproduces_that_domain() {
    let (mut n, mut g, src, aux, cfg) = stage2_fixture(3, |i| i as f64 * 0.5);
    stage2_graph(&mut n, &mut g, DomainId(0), &src, &aux, &cfg, Stage2Mode::FULL, &mut TrainLog::default()).unwrap();
    for d in g.known_ids() {
        let mix = MixtureDistribution::one_hot(d);
        for s in aux.values().flatten().take(20) {
            let x = ndarray::ArrayView1::from(&s.x);
            let via_mix = predict_with_mixture(&g, &n, &mix, x).unwrap();
            let direct = n.predict(x.insert_axis(ndarray::Axis(0)), d, None).unwrap();
            assert_eq!(via_mix, direct.row(0));
        }
    }
}

#[test]
fn entropy_step_does_not_increase_entropy() {
    for seed in 0..10 {
        let mut n = net(seed, DomainId(0));
        let data = two_class(seed + 20, 64, 0.0, DomainId(0));
        adagraph::training::stage1_source(&mut n, DomainId(0), &data, &TrainConfig::default(), &mut TrainLog::default()).unwrap();
        let mut buf = RefinementBuffer::new(16, 0.1, 1e-3).unwrap();
        for s in two_class(seed + 40, 16, 0.7, DomainId(0)) {
            buf.push(s.x).unwrap();
        }
        let before = refine_scale_bias(&mut n, DomainId(0), &buf, 1e-3).unwrap();
        let after = entropy(&n.predict(buf.matrix().view(), DomainId(0), None).unwrap());
        assert!(after <= before + 1e-15, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn predictions_never_see_the_current_or_later_samples() {
    let mut n = net(5, DomainId(0));
    adagraph::training::stage1_source(&mut n, DomainId(0), &two_class(1, 64, 0.0, DomainId(0)), &TrainConfig::default(), &mut TrainLog::default()).unwrap();
    let stream = two_class(2, 80, 0.3, DomainId(0));
    let cut = 37;
    let mut altered = stream.clone();
    for s in &mut altered[cut..] {
        s.x = vec![s.x[1] * 3.0 - 1.0, -s.x[0]];
    }
    let run = |data: &[Sample]| {
        let mut e = RefinementEngine::new(n.clone(), DomainId(0), RefinementBuffer::new(16, 0.1, 1e-2).unwrap(), RefineMode::Full).unwrap();
        data.iter().map(|s| e.step(&s.x).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(&stream), run(&altered));
    assert_eq!(a[..=cut], b[..=cut]);
}

#[test]
fn half_turn_maps_the_outer_moon_onto_the_inner_moon() {
    for k in 0..=20 {
        let t = std::f64::consts::PI * k as f64 / 20.0;
        let outer = [t.cos(), t.sin()];
        let inner = [1.0 - t.cos(), 0.5 - t.sin()];
        let r = rotate(outer, 180.0, [0.5, 0.25]);
        assert!((r[0] - inner[0]).abs() <= 1e-12 && (r[1] - inner[1]).abs() <= 1e-12);
    }
    let p = [0.3, -1.2];
    let composed = rotate(rotate(p, 35.0, [0.0, 0.0]), 55.0, [0.0, 0.0]);
    let direct = rotate(p, 90.0, [0.0, 0.0]);
    assert!((composed[0] - direct[0]).abs() <= 1e-12 && (composed[1] - direct[1]).abs() <= 1e-12);
    assert!((direct[0] - 1.2).abs() <= 1e-12 && (direct[1] - 0.3).abs() <= 1e-12);
}

#[test]
fn leave_one_out_covers_every_ordered_pair() {
    let family = generate_family(&DomainFamilySpec::default(), 16).unwrap();
    assert_eq!(leave_one_out_pairs(&family, 0.0, None).unwrap().len(), 18 * 17);
    // 60 degrees or more: 13 of the 17 others for each source.
    assert_eq!(leave_one_out_pairs(&family, 60.0, None).unwrap().len(), 18 * 13);

    let spec = small_spec(4);
    let small = generate_family(&spec, 16).unwrap();
    let pairs = leave_one_out_pairs(&small, 0.0, None).unwrap();
    let variants = [VariantId::Baseline, VariantId::AdaGraphBN, VariantId::AdaGraphFull];
    let runs = run_pda_grid(&spec, &small_cfg(), &variants, &pairs, &[0]).unwrap();
    assert_eq!(runs.len(), 12 * variants.len());
    for v in variants {
        let mut seen: Vec<_> = runs.iter().filter(|r| r.row.variant == v).map(|r| (r.row.source, r.row.target)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }
}

#[test]
fn target_coinciding_with_an_auxiliary_domain_is_recovered() {
    let mut cfg = small_cfg();
    cfg.kernel = KernelConfig::new(1e-4).unwrap();
    let family = generate_family(&small_spec(6), 16).unwrap();
    let ctx = PdaContext::new(&family, DomainId(0), &cfg).unwrap();
    let aux = [DomainId(1), DomainId(2), DomainId(4)];
    let mode = Stage2Mode {
        train_scale_bias: false,
        graph_forward: false,
    };
    let (n, g) = ctx.train_graph(&aux, mode).unwrap();
    for &d in &aux {
        let dom = family.domain(d).unwrap();
        let x = stack_all(&dom.samples);
        let own = accuracy(&n.predict(x.view(), d, None).unwrap(), &dom.samples).unwrap();
        let model = predict_from_metadata(&g, &n, dom.metadata.clone()).unwrap();
        let regressed = accuracy(&model.predict(x.view()).unwrap(), &dom.samples).unwrap();
        assert!((own - regressed).abs() <= 0.01, "{d}: {own} vs {regressed}");
    }
}

#[test]
fn full_auxiliary_sweep_matches_leave_one_out() {
    let spec = small_spec(6);
    let cfg = small_cfg();
    let rows = sweep_auxiliary_count(&spec, DomainId(0), DomainId(2), &[4], 2, &cfg).unwrap();
    for row in rows {
        let direct = run_pda(&spec, VariantId::AdaGraphFull, DomainId(0), DomainId(2), &cfg.with_seed(row.seed)).unwrap();
        assert_eq!(row.accuracy, direct.row.accuracy);
    }
}

#[test]
fn nearest_single_auxiliary_beats_the_farthest() {
    let spec = small_spec(12);
    let (source, target) = (DomainId(0), DomainId(2));
    let (mut near, mut far) = (0.0, 0.0);
    let seeds = 0..4u64;
    for seed in seeds.clone() {
        let cfg = small_cfg().with_seed(seed);
        let family = generate_family(&DomainFamilySpec { seed, ..spec.clone() }, 16).unwrap();
        let ctx = PdaContext::new(&family, source, &cfg).unwrap();
        near += ctx.run_with_aux(target, &[DomainId(3)], &[VariantId::AdaGraphBN]).unwrap()[0].row.accuracy;
        far += ctx.run_with_aux(target, &[DomainId(8)], &[VariantId::AdaGraphBN]).unwrap()[0].row.accuracy;
    }
    let k = seeds.count() as f64;
    assert!(near / k >= far / k, "nearest {} vs farthest {}", near / k, far / k);
}

#[test]
fn refinement_without_drift_keeps_accuracy() {
    let stream = StreamSpec {
        length: 800,
        start_deg: 0.0,
        end_deg: 0.0,
    };
    let cfg = small_cfg();
    let runs = run_continuous(&small_spec(6), &stream, &ContinuousVariant::ALL, &cfg).unwrap();
    let base = runs[0].accuracy;
    for r in &runs {
        assert_eq!(r.records.len(), 800);
        assert_eq!(r.records.last().unwrap().cum_acc, Some(r.accuracy));
        assert!((r.accuracy - base).abs() <= 0.02, "{}: {} vs {base}", r.variant, r.accuracy);
    }
}

#[test]
fn refining_variants_without_updates_match_their_frozen_counterparts() {
    let spec = small_spec(6);
    let mut cfg = small_cfg();
    // Larger than any target domain: the buffer never fills.
    cfg.buffer_capacity = spec.samples_per_domain + 1;
    let runs = run_pda(&spec, VariantId::Baseline, DomainId(0), DomainId(3), &cfg).unwrap();
    let family = generate_family(&spec, 16).unwrap();
    let ctx = PdaContext::new(&family, DomainId(0), &cfg).unwrap();
    let all = ctx.run(DomainId(3), &VariantId::ALL).unwrap();
    let acc = |v: VariantId| all.iter().find(|r| r.row.variant == v).unwrap().row.accuracy;
    assert_eq!(acc(VariantId::Baseline), runs.row.accuracy);
    assert_eq!(acc(VariantId::BaselineRefine), acc(VariantId::Baseline));
    assert_eq!(acc(VariantId::AdaGraphRefine), acc(VariantId::AdaGraphFull));
    let hash = |v: VariantId| all.iter().find(|r| r.row.variant == v).unwrap().state_hash.clone();
    assert_eq!(hash(VariantId::AdaGraphFull), hash(VariantId::AdaGraphRefine));
    assert_eq!(hash(VariantId::Baseline), hash(VariantId::BaselineRefine));
    assert_ne!(hash(VariantId::AdaGraphBN), hash(VariantId::AdaGraphSB));
}

#[test]
fn repeated_runs_are_identical() {
    let spec = small_spec(5);
    let cfg = small_cfg();
    let a = run_pda_grid(&spec, &cfg, &VariantId::ALL, &[(DomainId(1), DomainId(3))], &[0, 1]).unwrap();
    let b = run_pda_grid(&spec, &cfg, &VariantId::ALL, &[(DomainId(1), DomainId(3))], &[0, 1]).unwrap();
    assert_eq!(a, b);
    let stream = StreamSpec {
        length: 200,
        ..StreamSpec::default()
    };
    let x = run_continuous(&spec, &stream, &ContinuousVariant::ALL, &cfg).unwrap();
    let y = run_continuous(&spec, &stream, &ContinuousVariant::ALL, &cfg).unwrap();
    for (p, q) in x.iter().zip(&y) {
        assert_eq!(p.records, q.records);
    }
}
