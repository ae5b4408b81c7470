//! Property tests over codecs, metrics and numeric invariants.

use farnet::arm::TargetStats;
use farnet::checkpoint::{Checkpoint, NamedTensor};
use farnet::config::RunConfig;
use farnet::data::Image;
use farnet::numerics::{AdamWState, Graph, Tensor};
use farnet::retrieval::{recall_at_k, subset_recall_at_k, RecallReport};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1e3f64..1e3, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        prop::collection::vec(("[a-z_.]{1,12}", tensor()), 0..4),
        any::<u64>(),
        prop::collection::vec(prop::collection::vec(any::<f64>(), 0..6), 0..3),
        any::<u64>(),
        any::<u64>(),
        any::<u64>(),
        prop::option::of((any::<f64>(), 0f64..10.0)),
    )
        .prop_map(|(params, step, states, epoch, seed, counter, stats)| Checkpoint {
            config: RunConfig::default().to_text(),
            params: params.into_iter().map(|(name, tensor)| NamedTensor { name, tensor }).collect(),
            optimizer_step: step,
            optimizer_states: states
                .into_iter()
                .map(|m| AdamWState {
                    v: m.iter().map(|x| x.abs()).collect(),
                    m,
                })
                .collect(),
            epoch,
            rng_seed: seed,
            rng_counter: counter,
            running_stats: stats.map(|(mean, std)| TargetStats { mean, std }),
        })
}

/// Random permutation rankings over `n` ids, with truth and a group
/// containing the truth.
fn retrieval_case() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<usize>, Vec<Vec<usize>>)> {
    (4usize..20, 1usize..8).prop_flat_map(|(n, q)| {
        let one = (Just((0..n).collect::<Vec<_>>()).prop_shuffle(), 0..n, prop::collection::vec(0..n, 1..n));
        prop::collection::vec(one, q).prop_map(|cases| {
            let mut rankings = Vec::new();
            let mut truths = Vec::new();
            let mut groups = Vec::new();
            for (ranking, truth, mut group) in cases {
                group.push(truth);
                group.push((truth + 1) % ranking.len());
                group.sort_unstable();
                group.dedup();
                rankings.push(ranking);
                truths.push(truth);
                groups.push(group);
            }
            (rankings, truths, groups)
        })
    })
}

proptest! {
    #[test]
    fn checkpoint_round_trips(c in checkpoint()) {
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(c in checkpoint(), cut in 1usize..64) {
        let bytes = c.encode();
        let cut = cut.min(bytes.len());
        prop_assert!(Checkpoint::decode(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn ppm_round_trips(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = farnet::numerics::Rng::new(seed);
        let pixels = (0..w * h * 3).map(|_| rng.below(256) as u8).collect();
        let img = Image::new(w, h, 3, pixels).unwrap();
        prop_assert_eq!(Image::from_ppm(&img.to_ppm()).unwrap(), img);
    }

    #[test]
    fn config_text_is_canonical(
        seed in any::<u64>(),
        lambda1 in 0.0f64..=1.0,
        lambda2 in 0.0f64..=1.0,
        tau in 1e-3f64..1.0,
        epochs in 1usize..100,
        source in prop::sample::select(vec!["u", "mlp_fu", "mean(u,u')"]),
    ) {
        let text = format!(
            "seed = {seed}\nlambda1 = {lambda1}\nlambda2 = {lambda2}\ntau = {tau}\nepochs = {epochs}\nquery_source = {source}\n"
        );
        let c = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(c.seed, seed);
        prop_assert_eq!(c.lambda1, lambda1);
        prop_assert_eq!(c.tau, tau);
        let again = RunConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn recall_is_monotone_and_subset_dominates((rankings, truths, groups) in retrieval_case()) {
        let mut prev = 0.0;
        for k in 1..=rankings[0].len() {
            let r = recall_at_k(&rankings, &truths, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
            let s = subset_recall_at_k(&rankings, &truths, &groups, k).unwrap();
            prop_assert!(s >= r);
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn report_avg_identity((rankings, truths, groups) in retrieval_case()) {
        let padded: Vec<Vec<usize>> = rankings.iter().map(|r| {
            let mut r = r.clone();
            r.extend(r.len()..60);
            r
        }).collect();
        let report = RecallReport::compute(&padded, &truths, &groups).unwrap();
        prop_assert_eq!(report.avg, (report.recall(5) + report.subset_recall(1)) / 2.0);
        let parsed = RecallReport::from_json(&report.to_json()).unwrap();
        prop_assert_eq!(parsed, report);
    }

    #[test]
    fn softmax_rows_are_stochastic(t in tensor()) {
        let mut g = Graph::inference();
        let x = g.constant(t);
        let s = g.softmax_rows(x);
        let v = g.value(s);
        for r in 0..v.rows() {
            prop_assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn normalize_rows_gives_unit_rows(t in tensor()) {
        let mut g = Graph::inference();
        let x = g.constant(t.clone());
        let n = g.normalize_rows(x).unwrap();
        let v = g.value(n);
        for r in 0..v.rows() {
            if t.row(r).iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                let norm = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}
