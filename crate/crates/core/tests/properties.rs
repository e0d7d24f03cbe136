mod common;

use common::rows64;
use fsad::ide::{self, Checkpoint, EncoderInput, IdeConfig, IdeParams, Mode};
use fsad::linalg;
use fsad::metrics::{self, PixelSample, ProConfig};
use fsad::nve::{self, local_pca};
use fsad::scoring::{self, ScoreConfig, ScoreMap};
use fsad::synth::oracle;
use fsad::tensor::{AdamW, AdamWConfig, Tape, Tensor};
use proptest::prelude::*;

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(finite(-3.0, 3.0), cols), rows)
}

/// Scores with frequent ties plus binary labels, 1..=32 elements.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..=32).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(0u8..5).prop_map(|v| v as f64 / 4.0), finite(-1.0, 1.0)], n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn same(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ranking_metrics_match_oracles((s, y) in scored_labels()) {
        prop_assert!(same(metrics::auroc(&s, &y), oracle::auroc(&s, &y)));
        prop_assert!(same(metrics::average_precision(&s, &y), oracle::average_precision(&s, &y)));
        prop_assert!(same(metrics::f1_max(&s, &y), oracle::f1_max(&s, &y)));
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms((s, y) in scored_labels(), a in 0.1f64..5.0, b in -2.0f64..2.0) {
        let t: Vec<f64> = s.iter().map(|x| a * x + b + x.powi(3)).collect();
        prop_assert!(same(metrics::auroc(&s, &y), metrics::auroc(&t, &y)));
        prop_assert!(same(metrics::average_precision(&s, &y), metrics::average_precision(&t, &y)));
        prop_assert!(same(metrics::f1_max(&s, &y), metrics::f1_max(&t, &y)));
    }

    #[test]
    fn pro_matches_oracle(
        (h, w, scores, mask) in (1usize..=5, 1usize..=6).prop_flat_map(|(h, w)| (
            Just(h),
            Just(w),
            prop::collection::vec(prop_oneof![(0u8..4).prop_map(|v| v as f64), finite(0.0, 1.0)], h * w),
            prop::collection::vec(prop::bool::weighted(0.3), h * w),
        ))
    ) {
        let cfg = ProConfig::default();
        let got = metrics::pro(&[PixelSample { scores: &scores, mask: &mask, height: h, width: w }], &cfg);
        let want = oracle::pro(&[(scores.clone(), mask.clone(), h, w)], cfg.fpr_cap);
        match (got, want) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-3, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn connected_components_match_oracle(
        (h, w, mask) in (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<bool>(), h * w)))
    ) {
        let (labels, count) = metrics::connected_components(&mask, h, w);
        let regions = oracle::regions(&mask, h, w);
        prop_assert_eq!(count, regions.len());
        for region in regions {
            let l = labels[region[0]];
            prop_assert!(region.iter().all(|&p| labels[p] == l));
            prop_assert_eq!(labels.iter().filter(|&&x| x == l).count(), region.len());
        }
    }

    #[test]
    fn denoising_never_grows_and_alpha_one_empties_the_subspace(
        nbrs in (2usize..10, 3usize..10).prop_flat_map(|(c, k)| matrix(k, c)),
        res_seed in prop::collection::vec(finite(-3.0, 3.0), 10),
        rank in 1usize..5,
        alpha in 0.0f64..=1.0,
    ) {
        let c = nbrs[0].len();
        let n32: Vec<Vec<f32>> = nbrs.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
        let refs: Vec<&[f32]> = n32.iter().map(Vec::as_slice).collect();
        let sub = local_pca(&refs, rank.min(c - 1).min(nbrs.len() - 2)).unwrap();
        let res = Tensor::matrix(1, c, res_seed[..c].iter().map(|&v| v as f32).collect()).unwrap();
        let rn = common::l2(&rows64(&res)[0]);
        for a in [alpha, 1.0] {
            let den = nve::denoise(&res, std::slice::from_ref(&sub), a);
            let d = &rows64(&den)[0];
            prop_assert!(common::l2(d) <= rn * (1.0 + 1e-6) + 1e-12);
            if a == 1.0 {
                for u in &sub.basis[..sub.effective_rank] {
                    prop_assert!(linalg::dot(u, d).abs() <= 1e-5 * rn + 1e-12);
                }
            }
        }
    }

    #[test]
    fn projection_is_linear(
        tokens in (2usize..8, 1usize..5).prop_flat_map(|(c, m)| matrix(m, c)),
        f in prop::collection::vec(finite(-3.0, 3.0), 8),
        g in prop::collection::vec(finite(-3.0, 3.0), 8),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let c = tokens[0].len();
        let (f, g) = (&f[..c], &g[..c]);
        let mix: Vec<f64> = f.iter().zip(g).map(|(x, y)| a * x + b * y).collect();
        let lhs = scoring::project(&mix, &tokens);
        let (pf, pg) = (scoring::project(f, &tokens), scoring::project(g, &tokens));
        for i in 0..c {
            prop_assert!((lhs[i] - a * pf[i] - b * pg[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn projection_onto_orthonormal_bank_is_idempotent(
        tokens in (2usize..8, 1usize..5).prop_flat_map(|(c, m)| matrix(m, c)),
        f in prop::collection::vec(finite(-3.0, 3.0), 8),
    ) {
        let c = tokens[0].len();
        let mut bank: Vec<Vec<f64>> = Vec::new();
        for t in &tokens {
            if let Some(u) = linalg::orthogonalize(t, &bank) {
                bank.push(u);
            }
        }
        let once = scoring::project(&f[..c], &bank);
        let twice = scoring::project(&once, &bank);
        for i in 0..c {
            prop_assert!((once[i] - twice[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn scores_stay_in_unit_interval_and_aggregation_is_monotone(
        raw in prop::collection::vec(finite(-0.5, 1.5), 16),
        bump_at in 0usize..16,
        bump in 0.0f64..1.0,
    ) {
        let map = ScoreMap::from_patch_scores(&raw.iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>(), 4, &ScoreConfig::default()).unwrap();
        prop_assert!(map.pixel_map.iter().chain(&map.patch_scores).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((0.0..=1.0).contains(&map.image_score));
        let mut up = raw.clone();
        up[bump_at] += bump;
        prop_assert!(scoring::image_score(&up) >= scoring::image_score(&raw));
    }

    #[test]
    fn patch_score_is_clamped(
        v in prop::collection::vec(finite(-2.0, 2.0), 12),
    ) {
        let s = scoring::patch_score(&v[0..3], &v[3..6], &v[6..9], &v[9..12]);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn bilinear_matches_reference_resampler(
        grid in prop::collection::vec(finite(0.0, 1.0), 16),
        h in 1usize..12,
        w in 1usize..12,
    ) {
        let got = scoring::upsample_bilinear(&grid, 4, h, w);
        let (lo, hi) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        for y in 0..h {
            for x in 0..w {
                // corner-aligned source coordinates, interpolated along x then y
                let sy = if h == 1 { 0.0 } else { 3.0 * y as f64 / (h - 1) as f64 };
                let sx = if w == 1 { 0.0 } else { 3.0 * x as f64 / (w - 1) as f64 };
                let at = |r: usize, c: usize| grid[r.min(3) * 4 + c.min(3)];
                let (r0, c0) = (sy.floor() as usize, sx.floor() as usize);
                let (fy, fx) = (sy - r0 as f64, sx - c0 as f64);
                let want = (1.0 - fy) * ((1.0 - fx) * at(r0, c0) + fx * at(r0, c0 + 1))
                    + fy * ((1.0 - fx) * at(r0 + 1, c0) + fx * at(r0 + 1, c0 + 1));
                let v = got[y * w + x];
                prop_assert!((v - want).abs() < 1e-5);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn bce_rewards_the_correct_side(p in 0.01f64..0.99, q in 0.01f64..0.99) {
        let bce = |p: f64, y: bool| {
            let mut t = Tape::<f64>::new();
            let v = t.param(Tensor::scalar(p));
            let l = t.bce_loss(v, y, 1e-6).unwrap();
            t.backward(l).unwrap();
            (t.value(l).data()[0], t.grad(v).unwrap()[0])
        };
        let (lp, gp) = bce(p, true);
        let (ln, gn) = bce(p, false);
        prop_assert!(gp < 0.0 && gn > 0.0);
        if p < q {
            prop_assert!(bce(q, true).0 < lp);
            prop_assert!(bce(q, false).0 > ln);
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), tokens in 1usize..5, heads in prop::sample::select(vec![1usize, 2, 4]), with_opt in any::<bool>()) {
        let cfg = IdeConfig { channels: 8, heads, hidden: 12, tokens, ..IdeConfig::default() };
        let params = IdeParams::init(&cfg, seed).unwrap();
        let optimizer = with_opt.then(|| {
            let mut o = AdamW::new(AdamWConfig::default(), &params.sizes());
            let mut p: Vec<Vec<f32>> = params.blocks().iter().map(|b| b.data().to_vec()).collect();
            let g: Vec<Vec<f32>> = p.iter().map(|b| b.iter().map(|x| x * 0.5 + 0.01).collect()).collect();
            let mut pm: Vec<&mut [f32]> = p.iter_mut().map(|b| b.as_mut_slice()).collect();
            let gr: Vec<&[f32]> = g.iter().map(Vec::as_slice).collect();
            o.step(&mut pm, &gr, 1e-3).unwrap();
            o
        });
        let ck = Checkpoint { heads, params, optimizer };
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.encode(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permuting_tokens_permutes_the_output(seed in any::<u64>(), rows in 2usize..10, shift in 1usize..4) {
        let cfg = IdeConfig { channels: 8, heads: 2, hidden: 16, tokens: 4, ..IdeConfig::default() };
        let params = IdeParams::init(&cfg, seed).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let feats = common::mat32(&mut rng, rows, 8);
        let den = common::mat32(&mut rng, rows, 8);
        let mut mask = vec![false; rows];
        mask[seed as usize % rows] = true;
        let positions: Vec<usize> = (0..rows).collect();
        let input = EncoderInput::<f64>::new(&cfg, &feats, &den, &mask, &positions, 4).unwrap();
        let run = |p: &IdeParams| {
            let mut tape = Tape::<f64>::new();
            let vars = p.bind(&mut tape, false);
            let out = ide::forward(&mut tape, &cfg, &vars, &input, Mode::Eval).unwrap();
            tape.value(out.deviations).clone()
        };
        let base = run(&params);
        let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let mut blocks = params.blocks().to_vec();
        blocks[0] = blocks[0].select_rows(&perm);
        let moved = run(&IdeParams::from_blocks(blocks).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in moved.row(i).iter().zip(base.row(p)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dual_loss_is_the_weighted_sum_of_its_terms(seed in any::<u64>(), l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, m in 1usize..5) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let tokens = common::mat(&mut rng, m, 6);
        let den = common::mat(&mut rng, 5, 6);
        let mask = vec![true, false, true, true, false];
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(tokens.clone());
        let d = ide::dual_loss(&mut tape, t, &den, &mask, l1, l2).unwrap();
        let (disc, orth, total) = (tape.value(d.discriminability).data()[0], tape.value(d.orthogonality).data()[0], tape.value(d.total).data()[0]);
        prop_assert!((total - (l1 * disc + l2 * orth)).abs() < 1e-12);

        // direct evaluation
        let rows: Vec<Vec<f64>> = (0..m).map(|i| tokens.row(i).to_vec()).collect();
        let cos = |a: &[f64], b: &[f64]| linalg::dot(a, b) / (linalg::dot(a, a) * linalg::dot(b, b)).sqrt();
        let masked: Vec<usize> = (0..5).filter(|&i| mask[i]).collect();
        let want_disc = masked.iter().map(|&i| {
            let f: Vec<f64> = den.row(i).to_vec();
            rows.iter().map(|t| 1.0 - cos(&f, t)).fold(f64::INFINITY, f64::min)
        }).sum::<f64>() / masked.len() as f64;
        let mut want_orth = 0.0;
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    want_orth += cos(&rows[a], &rows[b]).powi(2);
                }
            }
        }
        if m > 1 {
            want_orth /= (m * (m - 1)) as f64;
        }
        prop_assert!((disc - want_disc).abs() < 1e-5);
        prop_assert!((orth - want_orth).abs() < 1e-5);
    }
}
