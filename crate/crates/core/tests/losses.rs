use rand::Rng;
use vlpert_core::gradcheck::{run_filtered, TOLERANCE};
use vlpert_core::losses::{
    attention_weights, global_contrastive_loss, local_contrastive_loss, local_matching_score, local_score_matrix,
    perturbation_loss_batch, perturbation_sensitivity_loss, total_loss, LossWeights, PertGroup,
};
use vlpert_core::rng::rng_from;
use vlpert_core::{Error, Tensor};

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn mat(rows: &[&[f64]]) -> Tensor {
    let c = rows[0].len();
    Tensor::new(rows.iter().flat_map(|r| r.iter().copied()).collect(), &[rows.len(), c]).unwrap()
}

fn v(x: &[f64]) -> Tensor {
    Tensor::vector(x.to_vec()).unwrap()
}

/// Columns of a d×n row-major matrix.
fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    let (d, n) = (t.shape()[0], t.shape()[1]);
    (0..n).map(|j| (0..d).map(|i| t.data()[i * n + j]).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Attention, context vectors, cosines and logsumexp, one scalar at a time.
fn local_score_oracle(image: &Tensor, words: &Tensor, tau_local: f64) -> f64 {
    let regions = columns(image);
    let words = columns(words);
    let mut total = 0.0;
    for w in &words {
        let logits: Vec<f64> = regions.iter().map(|r| dot(r, w) / tau_local).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let a: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let mut c = vec![0.0; w.len()];
        for (ak, r) in a.iter().zip(&regions) {
            for (ci, ri) in c.iter_mut().zip(r) {
                *ci += ak * ri;
            }
        }
        let s = dot(&c, w) / (norm(&c) * norm(w));
        total += (s / tau_local).exp();
    }
    total.ln()
}

const LOSS_CASES: [&str; 4] = [
    "global_contrastive_loss",
    "local_contrastive_loss",
    "perturbation_sensitivity_loss",
    "total_loss",
];

#[test]
fn loss_gradients_match_finite_differences() {
    let report = run_filtered(60, 77, |name| LOSS_CASES.contains(&name)).unwrap();
    assert_eq!(report.cases.len(), 4);
    for case in &report.cases {
        assert!(case.instances >= 50);
        assert!(case.max_relative_error < TOLERANCE, "{}: {}", case.name, case.max_relative_error);
    }
}

#[test]
fn global_single_pair_is_zero() {
    let mut rng = rng_from(1);
    for _ in 0..20 {
        let l = global_contrastive_loss(&random(&mut rng, &[1, 5]), &random(&mut rng, &[1, 5]), 0.07).unwrap();
        assert_eq!(l.item(), 0.0);
    }
}

#[test]
fn global_two_orthonormal_pairs() {
    let tau = 0.07;
    let e = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let l = global_contrastive_loss(&e, &e, tau).unwrap().item();
    let oracle = -((1.0 / tau).exp() / ((1.0 / tau).exp() + 1.0)).ln();
    assert!((l - oracle).abs() < 1e-12 * oracle.max(1e-3), "{l} vs {oracle}");
    assert!((l - 6.25e-7).abs() < 1e-9);

    let deranged = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
    assert!(global_contrastive_loss(&e, &deranged, tau).unwrap().item() > l);
}

#[test]
fn global_derangement_increases_loss() {
    let tau = 0.07;
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let e = Tensor::new(eye, &[4, 4]).unwrap();
    let aligned = global_contrastive_loss(&e, &e, tau).unwrap().item();
    let shifted = e.select_rows(&[1, 2, 3, 0]).unwrap();
    assert!(global_contrastive_loss(&e, &shifted, tau).unwrap().item() > aligned);
}

#[test]
fn global_errors() {
    let a = mat(&[&[1.0, 0.0]]);
    let b = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert!(matches!(global_contrastive_loss(&a, &b, 0.07), Err(Error::Shape { .. })));
    assert!(global_contrastive_loss(&a, &a, 0.0).is_err());
    assert!(global_contrastive_loss(&a, &a, -1.0).is_err());
}

#[test]
fn attention_examples() {
    let eye = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let word = mat(&[&[1.0], &[0.0]]);
    let a = attention_weights(&eye, &word, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((a.data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((a.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    assert!((a.data()[0] - 0.73106).abs() < 1e-5 && (a.data()[1] - 0.26894).abs() < 1e-5);

    let word = mat(&[&[1.0], &[1.0]]);
    assert_eq!(attention_weights(&eye, &word, 1.0).unwrap().to_vec(), vec![0.5, 0.5]);
    assert!(attention_weights(&eye, &mat(&[&[1.0], &[0.0], &[0.0]]), 1.0).is_err());
}

#[test]
fn attention_columns_sum_to_one() {
    let mut rng = rng_from(2);
    for _ in 0..200 {
        let (d, m, w) = (rng.gen_range(1..8), rng.gen_range(1..6), rng.gen_range(1..6));
        let scale = rng.gen_range(0.1..30.0);
        let a = attention_weights(&random(&mut rng, &[d, m]).scale(scale), &random(&mut rng, &[d, w]), 0.5).unwrap();
        for col in columns(&a) {
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn local_score_matches_step_by_step_oracle() {
    let mut rng = rng_from(3);
    for tau_local in [1.0, 0.5, 2.0] {
        for _ in 0..20 {
            let image = random(&mut rng, &[3, 2]);
            let words = random(&mut rng, &[3, 2]);
            let got = local_matching_score(&image, &words, tau_local).unwrap().item();
            let want = local_score_oracle(&image, &words, tau_local);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn local_score_trivial_cases() {
    let word = mat(&[&[0.3], &[-0.4], &[1.2]]);
    let s = local_matching_score(&word, &word, 0.5).unwrap().item();
    assert!((s - 2.0).abs() < 1e-12);

    // contexts along e1, words along the other axes: every cosine is zero
    for w in [2usize, 3] {
        let image = Tensor::new((0..4 * 2).map(|i| if i < 2 { 1.0 } else { 0.0 }).collect(), &[4, 2]).unwrap();
        let mut words = vec![0.0; 4 * w];
        for j in 0..w {
            words[(j + 1) * w + j] = 1.0;
        }
        let words = Tensor::new(words, &[4, w]).unwrap();
        let s = local_matching_score(&image, &words, 1.0).unwrap().item();
        assert!((s - (w as f64).ln()).abs() < 1e-12);
    }

    let zero_word = mat(&[&[0.0], &[0.0], &[0.0]]);
    assert!(matches!(local_matching_score(&word, &zero_word, 1.0), Err(Error::ZeroNorm)));
}

fn basis(d: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[i] = 1.0;
    e
}

fn from_columns(cols: &[Vec<f64>]) -> Tensor {
    let d = cols[0].len();
    let n = cols.len();
    Tensor::new((0..d * n).map(|k| cols[k % n][k / n]).collect(), &[d, n]).unwrap()
}

#[test]
fn local_loss_examples() {
    let mut rng = rng_from(4);
    let l = local_contrastive_loss(&[random(&mut rng, &[4, 3])], &[random(&mut rng, &[4, 5])], 0.07, 1.0).unwrap();
    assert_eq!(l.item(), 0.0);

    let img1 = from_columns(&[basis(4, 0), basis(4, 1)]);
    let txt1 = img1.clone();
    let img2 = from_columns(&[basis(4, 2), basis(4, 3)]);
    let txt2 = img2.clone();
    let images = [img1.clone(), img2.clone()];
    let texts = [txt1.clone(), txt2.clone()];
    let loss = local_contrastive_loss(&images, &texts, 0.07, 1.0).unwrap().item();
    assert!(loss < 2f64.ln());

    // anchor 1 by itself, scored with the oracle
    let s11 = local_score_oracle(&img1, &txt1, 1.0);
    let s12 = local_score_oracle(&img1, &txt2, 1.0);
    let s21 = local_score_oracle(&img2, &txt1, 1.0);
    assert!(s11 > s12 && s11 > s21);
    let row = -((s11 / 0.07) - ((s11 / 0.07).exp() + (s12 / 0.07).exp()).ln());
    assert!(row < 2f64.ln());

    let words = Tensor::cat_rows(&[txt1.t().unwrap(), txt2.t().unwrap()]).unwrap();
    let m = local_score_matrix(&images, &words, &[0..2, 2..4], 1.0).unwrap();
    assert!((m.data()[0] - s11).abs() < 1e-12);
    assert!((m.data()[1] - s12).abs() < 1e-12);
    assert!((m.data()[2] - s21).abs() < 1e-12);
}

#[test]
fn pert_identical_negatives_give_ln10() {
    let mut rng = rng_from(5);
    for _ in 0..10 {
        let e_i = random(&mut rng, &[6]);
        let e_t = random(&mut rng, &[6]);
        let perts = Tensor::cat_rows(&vec![e_t.reshape(&[1, 6]).unwrap(); 9]).unwrap().t().unwrap();
        let l = perturbation_sensitivity_loss(&e_i, &e_t, &perts, 0.07).unwrap().item();
        assert!((l - 10f64.ln()).abs() < 1e-9);
    }
}

#[test]
fn pert_separated_negatives_near_zero() {
    let e = v(&[1.0, 0.0]);
    let perts = Tensor::new([-1.0; 9].into_iter().chain([0.0; 9]).collect(), &[2, 9]).unwrap();
    let l = perturbation_sensitivity_loss(&e, &e, &perts, 0.07).unwrap().item();
    let oracle = (9.0 * (-2.0f64 / 0.07).exp()).ln_1p();
    // the positive logit cancels in log-space, leaving ~1e-15 absolute error
    assert!((l - oracle).abs() < 1e-14, "{l} vs {oracle}");
    assert!(l > 0.0 && l < 1e-11);
}

#[test]
fn pert_is_monotone_in_each_negative() {
    let mut rng = rng_from(6);
    for _ in 0..30 {
        let e_i = v(&[1.0, 0.0]);
        let e_t = v(&[rng.gen_range(0.2..1.0), rng.gen_range(-1.0..1.0)]);
        let angles: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..3.0)).collect();
        let build = |angles: &[f64]| {
            let xs: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
            let ys: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
            Tensor::new(xs.into_iter().chain(ys).collect(), &[2, angles.len()]).unwrap()
        };
        let base = perturbation_sensitivity_loss(&e_i, &e_t, &build(&angles), 0.07).unwrap().item();
        let k = rng.gen_range(0..5);
        let mut wider = angles.clone();
        wider[k] += 0.05;
        let lower = perturbation_sensitivity_loss(&e_i, &e_t, &build(&wider), 0.07).unwrap().item();
        assert!(lower < base);
    }
}

#[test]
fn pert_errors() {
    let e = v(&[1.0, 0.0]);
    let texts = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let groups = [PertGroup { sample: 0, positive: 0, negatives: vec![] }];
    assert!(matches!(
        perturbation_loss_batch(&e.reshape(&[1, 2]).unwrap(), &texts, &groups, 0.07),
        Err(Error::NoNegatives)
    ));
}

#[test]
fn losses_are_non_negative() {
    let mut rng = rng_from(7);
    for _ in 0..100 {
        let b = rng.gen_range(1..5);
        let d = rng.gen_range(2..8);
        let g = global_contrastive_loss(&random(&mut rng, &[b, d]), &random(&mut rng, &[b, d]), 0.07).unwrap();
        assert!(g.item() >= 0.0);
        let imgs: Vec<Tensor> = (0..b).map(|_| random(&mut rng, &[d, 3])).collect();
        let txts: Vec<Tensor> = (0..b)
            .map(|_| {
                let w = rng.gen_range(1..4);
                random(&mut rng, &[d, w])
            })
            .collect();
        assert!(local_contrastive_loss(&imgs, &txts, 0.07, 1.0).unwrap().item() >= 0.0);
        let p = perturbation_sensitivity_loss(
            &random(&mut rng, &[d]),
            &random(&mut rng, &[d]),
            &random(&mut rng, &[d, 4]),
            0.07,
        )
        .unwrap();
        assert!(p.item() >= 0.0);
    }
}

#[test]
fn global_and_pert_are_scale_invariant() {
    let mut rng = rng_from(8);
    for _ in 0..50 {
        let e_i = random(&mut rng, &[4, 6]);
        let e_t = random(&mut rng, &[4, 6]);
        let base = global_contrastive_loss(&e_i, &e_t, 0.07).unwrap().item();
        for c in [1e-3, 0.5, 7.0, 1e3] {
            let scaled = global_contrastive_loss(&e_i.scale(c), &e_t, 0.07).unwrap().item();
            assert!((scaled - base).abs() < 1e-12);
            let scaled = global_contrastive_loss(&e_i, &e_t.scale(c), 0.07).unwrap().item();
            assert!((scaled - base).abs() < 1e-12);
        }
        let (a, b, p) = (random(&mut rng, &[6]), random(&mut rng, &[6]), random(&mut rng, &[6, 9]));
        let base = perturbation_sensitivity_loss(&a, &b, &p, 0.07).unwrap().item();
        for c in [1e-3, 0.5, 7.0, 1e3] {
            for scaled in [
                perturbation_sensitivity_loss(&a.scale(c), &b, &p, 0.07),
                perturbation_sensitivity_loss(&a, &b.scale(c), &p, 0.07),
                perturbation_sensitivity_loss(&a, &b, &p.scale(c), 0.07),
            ] {
                assert!((scaled.unwrap().item() - base).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_losses_are_permutation_invariant() {
    let mut rng = rng_from(9);
    let perm = [2usize, 0, 3, 1];
    for _ in 0..30 {
        let e_i = random(&mut rng, &[4, 5]);
        let e_t = random(&mut rng, &[4, 5]);
        let a = global_contrastive_loss(&e_i, &e_t, 0.07).unwrap().item();
        let b = global_contrastive_loss(&e_i.select_rows(&perm).unwrap(), &e_t.select_rows(&perm).unwrap(), 0.07)
            .unwrap()
            .item();
        assert!((a - b).abs() < 1e-12);

        let imgs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[5, 3])).collect();
        let txts: Vec<Tensor> = (0..4).map(|i| random(&mut rng, &[5, 1 + i % 3])).collect();
        let a = local_contrastive_loss(&imgs, &txts, 0.07, 1.0).unwrap().item();
        let pi: Vec<Tensor> = perm.iter().map(|&k| imgs[k].clone()).collect();
        let pt: Vec<Tensor> = perm.iter().map(|&k| txts[k].clone()).collect();
        let b = local_contrastive_loss(&pi, &pt, 0.07, 1.0).unwrap().item();
        assert!((a - b).abs() < 1e-12);

        let texts = random(&mut rng, &[12, 5]);
        let groups: Vec<PertGroup> = (0..4)
            .map(|s| PertGroup { sample: s, positive: 3 * s, negatives: vec![3 * s + 1, 3 * s + 2] })
            .collect();
        let a = perturbation_loss_batch(&e_i, &texts, &groups, 0.07).unwrap().item();
        let permuted: Vec<PertGroup> = perm
            .iter()
            .enumerate()
            .map(|(new, &old)| PertGroup { sample: new, ..groups[old].clone() })
            .collect();
        let b = perturbation_loss_batch(&e_i.select_rows(&perm).unwrap(), &texts, &permuted, 0.07)
            .unwrap()
            .item();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn total_loss_arithmetic() {
    let weights = LossWeights::default();
    let (t, b) = total_loss(&v(&[1.0]), &v(&[2.0]), &v(&[3.0]), &weights).unwrap();
    assert!((t.item() - 1.5).abs() < 1e-12);
    assert_eq!((b.global, b.local, b.pert), (1.0, 2.0, 3.0));
    assert_eq!(b.total, t.item());

    let zero = LossWeights { alpha: 0.0, beta: 0.0, ..LossWeights::default() };
    let (t, _) = total_loss(&v(&[0.7]), &v(&[2.0]), &v(&[3.0]), &zero).unwrap();
    assert_eq!(t.item(), 0.7);

    let mut rng = rng_from(10);
    for _ in 0..100 {
        let w = LossWeights { alpha: rng.gen_range(0.0..2.0), beta: rng.gen_range(0.0..2.0), ..LossWeights::default() };
        let (g, l, p) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        let (_, b) = total_loss(&v(&[g]), &v(&[l]), &v(&[p]), &w).unwrap();
        assert!((b.total - (g + w.alpha * l + w.beta * p)).abs() < 1e-12);
    }
}

#[test]
fn weights_validate() {
    assert!(LossWeights::default().validate().is_ok());
    assert!(LossWeights { tau: 0.0, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights { tau_local: -1.0, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights { alpha: -0.1, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights { beta: f64::NAN, ..LossWeights::default() }.validate().is_err());
}
