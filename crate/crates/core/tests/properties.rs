use mapo::config::RunConfig;
use mapo::env::{self, Vocabulary};
use mapo::optim::{clip_global_norm, clipped_term};
use mapo::policy::{self, Head, PolicyParams, World};
use mapo::protocol::{self, Bbox, ProtocolError, ToolCall};
use mapo::rewards::{composite_advantage, group_normalize, trajectory_semantic_score};
use mapo::theorylab::estimate_rho;
use proptest::prelude::*;

fn z_scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..=1.0, 0..12)
}

fn grid_coord_pair() -> impl Strategy<Value = (f64, f64)> {
    (0u32..1_000_000, 1u32..=1_000_000).prop_map(|(a, b)| {
        let (lo, hi) = if a < b { (a, b) } else { (b.saturating_sub(1), a.max(b)) };
        let hi = if hi == lo { lo + 1 } else { hi };
        (lo as f64 / 1e6, hi as f64 / 1e6)
    })
}

fn label_word() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,8}",
        Just("</tool_call>".to_string()),
        Just("\"quoted\"".to_string()),
        Just("back\\slash".to_string()),
        Just("</box>".to_string()),
        Just("héllo".to_string()),
        Just("{\"json\":1}".to_string()),
    ]
}

proptest! {
    #[test]
    fn semantic_score_is_bounded(z in z_scores(), lambda in 0.001f64..=1.0) {
        let r = trajectory_semantic_score(&z, lambda).unwrap();
        prop_assert!(r.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn unit_discount_is_the_mean(z in prop::collection::vec(-1.0f64..=1.0, 1..12)) {
        let r = trajectory_semantic_score(&z, 1.0).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        prop_assert!((r - mean).abs() <= 1e-12);
    }

    #[test]
    fn normalization_centres_and_ignores_affine_maps(
        v in prop::collection::vec(-5.0f64..5.0, 2..16),
        a in 0.01f64..100.0,
        b in -10.0f64..10.0,
    ) {
        let n = group_normalize(&v).unwrap();
        prop_assert!(n.iter().sum::<f64>().abs() <= 1e-9);
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let m = group_normalize(&w).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        if std > 1e-6 && a * std > 1e-6 {
            for (x, y) in n.iter().zip(&m) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_beta_is_outcome_only(a_out in -5.0f64..5.0, a_sem in -5.0f64..5.0) {
        prop_assert_eq!(composite_advantage(a_out, a_sem, 0.0), a_out);
    }

    #[test]
    fn clipping_is_pessimistic(w in 0.0f64..4.0, a in -3.0f64..3.0, eps in 0.01f64..0.99) {
        prop_assert!(clipped_term(w, a, eps) <= w * a + 1e-15);
    }

    #[test]
    fn norm_clipping_keeps_direction(data in prop::collection::vec(-50.0f64..50.0, 8)) {
        let mut g = PolicyParams::zeros([2, 2, 2, 2], 1);
        g.data = data;
        let before = g.clone();
        let (norm, clipped) = clip_global_norm(&mut g, 1.0);
        if clipped {
            let cos = g.dot(&before) / (g.norm() * norm);
            prop_assert!((cos - 1.0).abs() <= 1e-12);
            prop_assert!((g.norm() - 1.0).abs() <= 1e-12);
        } else {
            prop_assert_eq!(g, before);
        }
    }

    #[test]
    fn tool_calls_round_trip(
        (x1, x2) in grid_coord_pair(),
        (y1, y2) in grid_coord_pair(),
        words in prop::collection::vec(label_word(), 1..=8),
        image_idx in 1u64..1000,
    ) {
        let call = ToolCall { image_idx, ..ToolCall::zoom(Bbox::new(x1, y1, x2, y2).unwrap(), words.join(" ")) };
        let text = protocol::serialize_tool_call(&call).unwrap();
        let back = protocol::parse_tool_call(&text).unwrap();
        prop_assert_eq!(&back, &call);
        prop_assert_eq!(protocol::serialize_tool_call(&back).unwrap(), text);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = protocol::parse_tool_call(&text);
        let wrapped = format!("<tool_call>{text}</tool_call>");
        prop_assert!(protocol::parse_tool_call(&wrapped).is_err() || text.contains("image_zoom_in_tool"));
    }

    #[test]
    fn scenes_have_a_unique_target(seed in any::<u64>(), n in 2usize..=8) {
        let vocab = Vocabulary::default();
        let (scene, query) = env::sample_task(&vocab, seed, n).unwrap();
        let class = scene.cells[scene.target_cell].object_class;
        prop_assert_eq!(scene.cells.iter().filter(|c| c.object_class == class).count(), 1);
        prop_assert_eq!(query.target_class, class);
    }

    #[test]
    fn policy_distributions_normalise(seed in any::<u64>(), scale in 0.0f64..20.0, temp in 0.05f64..5.0) {
        let config = RunConfig::default();
        let world = World::from_config(&config).unwrap();
        let mut rng = mapo::seed::rng(&[seed]);
        let mut p = world.initial_params();
        use rand::Rng;
        p.data.iter_mut().for_each(|x| *x = scale * (rng.random::<f64>() - 0.5));
        let x: Vec<f64> = (0..world.state_dim()).map(|_| rng.random::<f64>()).collect();
        for head in Head::ALL {
            let probs = policy::action_distribution(&p, &x, head, temp).unwrap();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(probs.iter().all(|&q| q >= 0.0));
        }
    }

    #[test]
    fn rho_estimate_is_a_correlation(groups in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 30..60)) {
        let est = estimate_rho(&groups);
        if est.valid {
            prop_assert!(est.rho >= -1.0 - 1e-9 && est.rho <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn multiple_calls_in_one_step_are_rejected() {
    let call = ToolCall::zoom(Bbox::new(0.1, 0.2, 0.4, 0.5).unwrap(), "red helmet");
    let one = protocol::serialize_tool_call(&call).unwrap();
    assert_eq!(protocol::parse_tool_call(&format!("{one}\n{one}")), Err(ProtocolError::MultipleToolCalls));
}
