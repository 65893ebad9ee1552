use proptest::prelude::*;

use gdfm::analysis::{recover_cvr, tv_distance, ChannelMatrix};
use gdfm::core::{
    derive_timeline, read_stream, write_stream, ActionSpec, ClickEvent, FeatureVector,
    ObservationKind,
};
use gdfm::losses::loss_delayed_label;
use gdfm::metrics::{auc, pr_auc, relative_improvement};
use gdfm::model::{CvrGrad, CvrModel, ModelDims};
use gdfm::weights::{combine_and_normalize, conditional_entropy, JointDist};

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3..1.0f64, n).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    })
}

fn click_with_specs() -> impl Strategy<Value = (ClickEvent, Vec<ActionSpec>)> {
    let action = (0.1..100.0f64, 2..5u32);
    (
        prop::collection::vec(action, 1..4),
        0.1..100.0f64,
        0.0..100.0f64,
        any::<bool>(),
        0.1..200.0f64,
        prop::collection::vec(0..1000u32, 2),
        any::<u64>(),
    )
        .prop_map(|(actions, label_delay, t, converts, conv_delay, slots, raw)| {
            let mut specs: Vec<ActionSpec> = actions
                .iter()
                .enumerate()
                .map(|(i, &(delay, card))| ActionSpec {
                    action_id: i as u32,
                    reveal_delay_hours: delay,
                    cardinality: card,
                    is_label_action: false,
                })
                .collect();
            specs.push(ActionSpec {
                action_id: specs.len() as u32,
                reveal_delay_hours: label_delay,
                cardinality: 2,
                is_label_action: true,
            });
            let mut outcomes: Vec<u32> = specs
                .iter()
                .enumerate()
                .map(|(i, s)| (raw.rotate_left(i as u32 * 7) as u32) % s.cardinality)
                .collect();
            *outcomes.last_mut().unwrap() = u32::from(converts);
            let click = ClickEvent {
                sample_id: 1,
                click_time_hours: t,
                features: FeatureVector::new(slots),
                converts,
                conversion_delay_hours: converts.then_some(conv_delay),
                actions: outcomes,
            };
            (click, specs)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn timeline_replays_every_action_exactly_once((click, specs) in click_with_specs()) {
        let events = derive_timeline(0, &click, &specs).unwrap();
        prop_assert_eq!(events.len(), specs.len());
        for spec in &specs {
            let matched: Vec<_> = events
                .iter()
                .filter(|e| match e.kind {
                    ObservationKind::ActionObserved { action_id, .. } => action_id == spec.action_id,
                    ObservationKind::LabelRevealed { .. } => spec.is_label_action,
                })
                .collect();
            prop_assert_eq!(matched.len(), 1, "action {} seen {} times", spec.action_id, matched.len());
            let e = matched[0];
            prop_assert!((e.reveal_time_hours - (click.click_time_hours + spec.reveal_delay_hours)).abs() < 1e-12);
            match e.kind {
                ObservationKind::ActionObserved { outcome, .. } => {
                    prop_assert_eq!(outcome, click.actions[spec.action_id as usize]);
                }
                ObservationKind::LabelRevealed { converted } => {
                    prop_assert_eq!(converted, click.converts);
                }
            }
        }
    }

    #[test]
    fn auc_survives_monotone_transforms_and_flips_on_complement(
        scores in prop::collection::vec(0.0..1.0f64, 2..120),
        flips in prop::collection::vec(any::<bool>(), 2..120),
    ) {
        let n = scores.len().min(flips.len());
        let scores = &scores[..n];
        let mut labels = flips[..n].to_vec();
        labels[0] = true;
        labels[n - 1] = false;

        let base = auc(scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 2.0 * s + 0.5).collect();
        prop_assert_eq!(auc(&cubed, &labels), Some(base));
        prop_assert_eq!(auc(&affine, &labels), Some(base));

        let complement: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let flipped = auc(&complement, &labels).unwrap();
        prop_assert!((flipped - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn pr_auc_stays_in_range_and_rewards_perfect_ranking(
        scores in prop::collection::vec(0.0..1.0f64, 2..120),
        flips in prop::collection::vec(any::<bool>(), 2..120),
    ) {
        let n = scores.len().min(flips.len());
        let scores = &scores[..n];
        let mut labels = flips[..n].to_vec();
        labels[0] = true;

        let ap = pr_auc(scores, &labels).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));

        let separated: Vec<f64> = labels.iter().map(|&y| if y { 0.9 } else { 0.1 }).collect();
        prop_assert_eq!(pr_auc(&separated, &labels), Some(1.0));
    }

    #[test]
    fn weights_normalize_to_mean_one_and_ignore_entropy_shifts(
        entropies in prop::collection::vec(0.0..0.7f64, 1..6),
        shift in 0.0..2.0f64,
        alpha in 0.0..3.0f64,
        beta in 0.0..3.0f64,
    ) {
        let delays: Vec<f64> = (0..entropies.len()).map(|i| 1.0 + 7.0 * i as f64).collect();
        let w = combine_and_normalize(&entropies, &delays, 48.0, alpha, beta).unwrap();
        let mean = w.weights.iter().sum::<f64>() / w.weights.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = entropies.iter().map(|h| h + shift).collect();
        let w2 = combine_and_normalize(&shifted, &delays, 48.0, alpha, beta).unwrap();
        for (a, b) in w.weights.iter().zip(&w2.weights) {
            prop_assert!((a - b).abs() < 1e-9, "shift by {shift} moved weight {a} to {b}");
        }
    }

    #[test]
    fn loss_gradients_accumulate_additively(
        slots_a in prop::collection::vec(0..16u32, 2),
        slots_b in prop::collection::vec(0..16u32, 2),
        ya in any::<bool>(),
        yb in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let dims = ModelDims { n_bins: 16, n_fields: 2, embed_dim: 3, hidden_dim: 4 };
        let mut rng = gdfm::par::seeded_rng(seed);
        let model = CvrModel::<f64>::init(dims, &mut rng).unwrap();
        let xa = FeatureVector::new(slots_a);
        let xb = FeatureVector::new(slots_b);

        let mut joint = CvrGrad::zeroed_like(&model);
        loss_delayed_label(&model, &xa, ya, &mut joint).unwrap();
        loss_delayed_label(&model, &xb, yb, &mut joint).unwrap();

        let mut ga = CvrGrad::zeroed_like(&model);
        loss_delayed_label(&model, &xa, ya, &mut ga).unwrap();
        let mut gb = CvrGrad::zeroed_like(&model);
        loss_delayed_label(&model, &xb, yb, &mut gb).unwrap();

        prop_assert_eq!(joint.t.b2, ga.t.b2 + gb.t.b2);
        for i in 0..joint.t.w2.len() {
            prop_assert_eq!(joint.t.w2[i], ga.t.w2[i] + gb.t.w2[i]);
        }
        for i in 0..joint.t.embedding.len() {
            prop_assert_eq!(joint.t.embedding[i], ga.t.embedding[i] + gb.t.embedding[i]);
        }
    }

    #[test]
    fn stream_csv_round_trips((click, specs) in click_with_specs()) {
        let mut other = click.clone();
        other.sample_id = 2;
        other.click_time_hours += 1.0;
        let clicks = vec![click, other];
        let _ = &specs;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.csv");
        write_stream(&path, &clicks).unwrap();
        let back = read_stream(&path).unwrap();
        prop_assert_eq!(back, clicks);
    }

    #[test]
    fn recovery_round_trips_through_well_conditioned_channels(
        n in 2..5usize,
        raw in prop::collection::vec(1e-3..1.0f64, 25),
        p_y in simplex(4),
    ) {
        let p_y = {
            let s: f64 = p_y[..n].iter().sum();
            p_y[..n].iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let mut entries = vec![0.0; n * n];
        for y in 0..n {
            let col = &raw[y * n..(y + 1) * n];
            let s: f64 = col.iter().sum();
            for a in 0..n {
                let mixed = 0.6 * f64::from(a == y as usize) + 0.4 * col[a] / s;
                entries[a * n + y] = mixed;
            }
        }
        let m = ChannelMatrix::new(n, n, entries).unwrap();
        let p_a = m.apply(&p_y);
        let recovered = recover_cvr(&m, &p_a).unwrap();
        for (r, t) in recovered.iter().zip(&p_y) {
            prop_assert!((r - t).abs() < 1e-8, "recovered {r}, wanted {t}");
        }
    }

    #[test]
    fn tv_is_symmetric_bounded_and_contracts_through_channels(
        p in simplex(4),
        q in simplex(4),
        raw in prop::collection::vec(1e-3..1.0f64, 12),
    ) {
        let d_pq = tv_distance(&p, &q).unwrap();
        let d_qp = tv_distance(&q, &p).unwrap();
        prop_assert_eq!(d_pq, d_qp);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&d_pq));
        prop_assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);

        let k = 3;
        let mut entries = vec![0.0; k * 4];
        for y in 0..4 {
            let col = &raw[y * k..(y + 1) * k];
            let s: f64 = col.iter().sum();
            for a in 0..k {
                entries[a * 4 + y] = col[a] / s;
            }
        }
        let m = ChannelMatrix::new(k, 4, entries).unwrap();
        let d_out = tv_distance(&m.apply(&p), &m.apply(&q)).unwrap();
        prop_assert!(d_out <= d_pq + 1e-12, "tv grew from {d_pq} to {d_out}");
    }

    #[test]
    fn conditional_entropy_never_exceeds_label_entropy(cells in prop::collection::vec(1e-3..1.0f64, 8)) {
        let s: f64 = cells.iter().sum();
        let p: Vec<f64> = cells.iter().map(|v| v / s).collect();
        let joint = JointDist::new(4, 2, p.clone()).unwrap();
        let h_cond = conditional_entropy(&joint);

        let p1: f64 = (0..4).map(|a| p[a * 2 + 1]).sum();
        let h_label = -(p1 * p1.ln() + (1.0 - p1) * (1.0 - p1).ln());
        prop_assert!(h_cond >= 0.0);
        prop_assert!(h_cond <= h_label + 1e-12, "H(y|a) {h_cond} exceeds H(y) {h_label}");
    }

    #[test]
    fn relative_improvement_pins_its_anchors(pre in 0.5..0.7f64, gap in 0.01..0.3f64, frac in 0.0..1.0f64) {
        let oracle = pre + gap;
        let m = pre + frac * gap;
        prop_assert!(relative_improvement(pre, pre, oracle).unwrap().abs() < 1e-12);
        prop_assert!((relative_improvement(oracle, pre, oracle).unwrap() - 100.0).abs() < 1e-12);
        let rel = relative_improvement(m, pre, oracle).unwrap();
        prop_assert!((rel - frac * 100.0).abs() < 1e-6);
    }
}
