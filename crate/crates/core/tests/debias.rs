use proptest::prelude::*;
use relctr::data::SearchSample;
use relctr::debias::{
    debias_loss, fake_rsl_from_uniform, inject_noise, make_negative, make_pairs, pairwise_loss,
    pairwise_loss_naive, sample_fake_rsl, truncated, DebiasConfig, PairwiseMode,
};
use relctr::gradcheck;
use relctr::ops::softplus;
use relctr::{rng, ParamStore, Tape, Tensor, Var};

const LN2: f64 = std::f64::consts::LN_2;

fn sample(rsl: u8, click: bool) -> SearchSample {
    SearchSample {
        user_id: 3,
        query_id: 4,
        item_id: 5,
        category: 1,
        query_text: vec!["w1".into(), "w2".into()],
        item_text: vec!["w1".into(), "w9".into()],
        rsl,
        exposed: true,
        click,
        dense: vec![0.25, -1.5, 3.0],
    }
}

fn scores<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
    tape.constant(Tensor::column(v.to_vec()))
}

#[test]
fn fake_level_boundaries() {
    assert_eq!(fake_rsl_from_uniform(0.2, 0.6, 0.1), 1);
    assert_eq!(fake_rsl_from_uniform(0.2, 0.6, 0.5), 2);
    assert_eq!(fake_rsl_from_uniform(0.2, 0.6, 0.9), 3);
    assert_eq!(fake_rsl_from_uniform(0.2, 0.6, 0.2), 2);
    assert_eq!(fake_rsl_from_uniform(0.2, 0.6, 0.6), 3);
    assert_eq!(fake_rsl_from_uniform(0.2, 0.6, 0.0), 1);
}

#[test]
fn equal_cut_points_never_yield_level_two() {
    let mut r = rng::stream(1, "fake");
    for _ in 0..10_000 {
        assert_ne!(sample_fake_rsl(0.4, 0.4, &mut r).unwrap(), 2);
    }
    assert!(sample_fake_rsl(0.6, 0.2, &mut r).is_err());
    let cfg = DebiasConfig {
        p1: 0.4,
        p2: 0.4,
        ..DebiasConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(DebiasConfig::default().validate().is_ok());
}

#[test]
fn zero_noise_is_identity_and_noise_is_reproducible() {
    let emb = Tensor::row_vector(vec![0.5, -1.0, 2.0]);
    let a = inject_noise(&emb, &mut rng::stream(9, "noise"));
    let b = inject_noise(&emb, &mut rng::stream(9, "noise"));
    assert_eq!(a, b);
    assert_ne!(a, emb);
    let cfg = DebiasConfig {
        noise_std: 0.0,
        ..DebiasConfig::default()
    };
    let pair = make_negative(&sample(4, true), 3, &cfg, &mut rng::stream(1, "n")).unwrap().unwrap();
    assert_eq!(pair.noise, vec![0.0; 3]);
}

#[test]
fn noise_squared_norm_has_mean_d() {
    let d = 16;
    let emb = Tensor::zeros(1, d);
    let mut r = rng::stream(2, "chi2");
    let n = 10_000;
    let mean = (0..n)
        .map(|_| inject_noise(&emb, &mut r).data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    // chi-square(16) has sd sqrt(32); the mean of 1e4 draws has sd 0.057
    assert!((mean - 16.0).abs() < 0.5, "mean {mean}");
}

#[test]
fn one_negative_per_qualifying_positive() {
    let mut batch = vec![sample(4, true), sample(4, true), sample(4, true)];
    batch.extend([sample(4, false), sample(3, true), sample(2, true), sample(1, false), sample(3, false)]);
    let cfg = DebiasConfig::default();
    let pairs = make_pairs(&batch, 4, &cfg, &mut rng::stream(3, "pairs")).unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!(pairs.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    for (_, p) in &pairs {
        assert!((1..=3).contains(&p.fake_rsl()));
        let mut restored = p.negative.clone();
        restored.rsl = 4;
        assert_eq!(restored, p.positive);
        assert_eq!(p.negative.dense, p.positive.dense);
        assert_eq!(p.noise.len(), 4);
    }
    assert!(make_negative(&sample(3, true), 4, &cfg, &mut rng::stream(3, "x")).unwrap().is_none());
}

#[test]
fn fake_levels_follow_the_cut_points() {
    let cfg = DebiasConfig::default();
    let mut r = rng::stream(4, "law");
    let mut counts = [0usize; 3];
    let n = 100_000;
    let pos = sample(4, true);
    for _ in 0..n {
        let p = make_negative(&pos, 1, &cfg, &mut r).unwrap().unwrap();
        counts[p.fake_rsl() as usize - 1] += 1;
    }
    for (c, want) in counts.iter().zip([0.2, 0.4, 0.4]) {
        // 5 sd of a binomial proportion at n = 1e5 is about 0.008
        assert!((*c as f64 / n as f64 - want).abs() < 0.008, "{counts:?}");
    }
}

#[test]
fn naive_loss_closed_forms() {
    let tape = Tape::new();
    let l = pairwise_loss_naive(scores(&tape, &[0.3]), scores(&tape, &[0.3]));
    assert!((l.item() - LN2).abs() < 1e-15);
    let l = pairwise_loss_naive(scores(&tape, &[0.1, 0.4, 0.9]), scores(&tape, &[0.1, 0.4, 0.9]));
    assert!((l.item() - 3.0 * LN2).abs() < 1e-15);
    let l = pairwise_loss_naive(scores(&tape, &[60.0]), scores(&tape, &[0.0]));
    assert!(l.item() < 1e-25);
    let l = pairwise_loss_naive(scores(&tape, &[]), scores(&tape, &[]));
    assert_eq!(l.item(), 0.0);
}

#[test]
fn naive_loss_matches_scalar_oracle() {
    let pos = [0.9, 0.2, 0.5, 0.05];
    let neg = [0.1, 0.6, 0.5, 0.3];
    let want: f64 = pos.iter().zip(neg).map(|(p, n)| (1.0 + (-(p - n) as f64).exp()).ln()).sum();
    let tape = Tape::new();
    let got = pairwise_loss_naive(scores(&tape, &pos), scores(&tape, &neg)).item();
    assert!((got - want).abs() < 1e-14);
}

#[test]
fn refined_loss_scalar_oracle() {
    let cfg = DebiasConfig::default();
    let pos = [0.05, 0.05, 0.05];
    let neg = [0.05, 0.0, -0.05];
    let want = (1.0 + 0.075f64.exp()).ln() + (1.0 + 0.025f64.exp()).ln() + LN2;
    let tape = Tape::new();
    let got = debias_loss(scores(&tape, &pos), scores(&tape, &neg), &cfg).item();
    assert!((got - cfg.weight * want).abs() < 1e-14, "{got} vs {want}");
    let half = DebiasConfig {
        weight: 0.5,
        ..cfg
    };
    let got = debias_loss(scores(&tape, &pos), scores(&tape, &neg), &half).item();
    assert!((got - 0.5 * want).abs() < 1e-14);
}

fn grad_wrt_scores(pos: &[f64], neg: &[f64], cfg: &DebiasConfig) -> (f64, Vec<f64>, Vec<f64>) {
    let mut ps = ParamStore::new();
    ps.insert("pos", Tensor::column(pos.to_vec()));
    ps.insert("neg", Tensor::column(neg.to_vec()));
    let tape = Tape::new();
    let l = pairwise_loss(ps.var(&tape, "pos"), ps.var(&tape, "neg"), cfg);
    let g = tape.backward(l).unwrap();
    (
        l.item(),
        g.get_or_zeros("pos", ps.get("pos")).into_data(),
        g.get_or_zeros("neg", ps.get("neg")).into_data(),
    )
}

#[test]
fn saturation_at_the_margin() {
    let cfg = DebiasConfig::default();
    let (l, gp, gn) = grad_wrt_scores(&[0.075], &[0.0], &cfg);
    assert_eq!(l, LN2);
    assert_eq!(gp, vec![0.0]);
    assert_eq!(gn, vec![0.0]);
    let (l, gp, _) = grad_wrt_scores(&[0.07, 0.07], &[-0.3, 0.0], &cfg);
    assert!((l - LN2 - softplus(0.005)).abs() < 1e-15);
    assert_eq!(gp[0], 0.0);
    assert!(gp[1] < 0.0);
}

#[test]
fn truncation_zeroes_value_and_gradient() {
    let cfg = DebiasConfig::default();
    let (l, gp, gn) = grad_wrt_scores(&[0.08, 0.10], &[0.5, 0.9], &cfg);
    assert_eq!(l, 0.0);
    assert!(gp.iter().chain(&gn).all(|&g| g == 0.0));
    let tape = Tape::new();
    assert!(truncated(scores(&tape, &[0.08]), &cfg));
    assert!(!truncated(scores(&tape, &[0.0799]), &cfg));
    // the naive loss has no truncation
    let naive = DebiasConfig {
        mode: PairwiseMode::Naive,
        ..cfg
    };
    let (l, gp, _) = grad_wrt_scores(&[0.08, 0.10], &[0.5, 0.9], &naive);
    assert!(l > 0.0 && gp.iter().all(|&g| g < 0.0));
}

#[test]
fn both_losses_pass_gradient_check() {
    for mode in [PairwiseMode::Refined, PairwiseMode::Naive] {
        let cfg = DebiasConfig {
            mode,
            ..DebiasConfig::default()
        };
        // gaps straddle the margin without touching it
        let pos = [0.02, 0.06, 0.01, 0.04, 0.07];
        let neg = [0.03, -0.05, 0.0, 0.01, 0.02];
        let mut ps = ParamStore::new();
        ps.insert("pos", Tensor::column(pos.to_vec()));
        ps.insert("neg", Tensor::column(neg.to_vec()));
        let f = |t: &Tape, p: &ParamStore| pairwise_loss(p.var(t, "pos"), p.var(t, "neg"), &cfg).item();
        let tape = Tape::new();
        let g = tape
            .backward(pairwise_loss(ps.var(&tape, "pos"), ps.var(&tape, "neg"), &cfg))
            .unwrap();
        let r = gradcheck::check(&ps, &g, |_| true, 1, |p| f(&Tape::new(), p));
        assert!(r.max_rel_err <= 1e-4, "{mode:?}: {:?}", r.worst);
    }
}

proptest! {
    #[test]
    fn per_pair_gradient_sign(gap in -1.0f64..1.0) {
        prop_assume!((gap - 0.075).abs() > 1e-9);
        let cfg = DebiasConfig::default();
        let (_, gp, _) = grad_wrt_scores(&[0.0], &[-gap], &cfg);
        if gap > 0.075 {
            prop_assert_eq!(gp[0], 0.0);
        } else {
            prop_assert!(gp[0] < 0.0);
        }
    }

    #[test]
    fn naive_loss_decreases_in_gap(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        prop_assume!(a < b - 1e-6);
        let tape = Tape::new();
        let la = pairwise_loss_naive(scores(&tape, &[a]), scores(&tape, &[0.0])).item();
        let lb = pairwise_loss_naive(scores(&tape, &[b]), scores(&tape, &[0.0])).item();
        prop_assert!(la > lb);
    }
}
