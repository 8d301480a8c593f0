use lomt_core::analysis::LayerFlags;
use lomt_core::train::combined_loss_value;
use lomt_core::{compression_ratio, last_active_layer, prox_group, Error, SparsityPattern};
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn group() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..16)
}

proptest! {
    #[test]
    fn prox_shrinks_norm_by_exactly_the_threshold(v in group(), t in 0.0f64..20.0) {
        let out = prox_group(&v, t);
        let expected = (norm(&v) - t).max(0.0);
        prop_assert!((norm(&out) - expected).abs() < 1e-9 * (1.0 + norm(&v)));
    }

    #[test]
    fn prox_keeps_direction_or_returns_exact_zero(v in group(), t in 0.0f64..20.0) {
        let out = prox_group(&v, t);
        if out.iter().all(|&a| a == 0.0) {
            prop_assert!(norm(&v) <= t);
        } else {
            let s = norm(&out) / norm(&v);
            for (o, a) in out.iter().zip(&v) {
                prop_assert!((o - s * a).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn prox_is_nonexpansive(v in group(), w in group(), t in 0.0f64..5.0) {
        let n = v.len().min(w.len());
        let (v, w) = (&v[..n], &w[..n]);
        let (pv, pw) = (prox_group(v, t), prox_group(w, t));
        let d_in: f64 = v.iter().zip(w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let d_out: f64 = pv.iter().zip(&pw).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d_out <= d_in + 1e-12);
    }

    #[test]
    fn prox_composes_additively(v in group(), s in 0.0f64..5.0, t in 0.0f64..5.0) {
        let once = prox_group(&v, s + t);
        let twice = prox_group(&prox_group(&v, s), t);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn last_active_layer_is_the_deepest_live_layer(
        live in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..6), 1..10),
        trailing in 0usize..4,
    ) {
        let mut layers: Vec<LayerFlags> = live
            .iter()
            .enumerate()
            .map(|(i, z)| LayerFlags { layer_id: i, zero: z.clone() })
            .collect();
        let expected = layers.iter().rev().find(|l| l.is_active()).map(|l| l.layer_id);
        let n = layers.len();
        layers.extend((0..trailing).map(|k| LayerFlags { layer_id: n + k, zero: vec![true; 3] }));
        let p = SparsityPattern { task_name: "t".into(), lambda: 1e-3, seed: 0, layers };
        match expected {
            Some(l) => prop_assert_eq!(last_active_layer(&p).unwrap(), l),
            None => prop_assert!(matches!(last_active_layer(&p), Err(Error::AllZeroPattern))),
        }
    }

    #[test]
    fn compression_ratio_is_at_least_one(total in 1.0f64..1e9, frac in 1e-6f64..=1.0) {
        let r = compression_ratio(total, total * frac).unwrap();
        prop_assert!(r.compression_ratio >= 1.0 - 1e-12);
        prop_assert!((r.compression_ratio * frac - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uncertainty_objective_is_minimized_at_log_loss(l in 1e-3f64..100.0, d in -2.0f64..2.0) {
        let best = l.ln();
        prop_assert!(combined_loss_value(&[l], &[best]) <= combined_loss_value(&[l], &[best + d]) + 1e-12);
    }
}
