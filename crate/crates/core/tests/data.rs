use vlpert_core::data::{
    generate_corpus, generate_pair, glyph_mask, load_corpus, parse_report, render, save_corpus, FINDINGS,
    GLYPH_INTENSITY, NOISE_AMPLITUDE,
};
use vlpert_core::perturbation::{TextPipeline, UNK_ID};

#[test]
fn generation_is_deterministic() {
    let a = generate_corpus(2, 32, 17).unwrap();
    let b = generate_corpus(2, 32, 17).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].image.pixels, b[0].image.pixels);
    let c = generate_corpus(2, 32, 18).unwrap();
    assert_ne!(a[0].image.pixels, c[0].image.pixels);
    // shards agree with the full corpus
    assert_eq!(generate_pair(1, 32, 17).unwrap(), a[1]);
}

#[test]
fn small_sides_and_empty_corpora_are_rejected() {
    assert!(generate_corpus(1, 15, 0).is_err());
    assert!(generate_corpus(0, 32, 0).is_err());
    assert!(generate_corpus(1, 16, 0).is_ok());
}

#[test]
fn all_negative_sample_is_noise_only() {
    let none = [false; FINDINGS];
    let img = render(&none, &none, 32, 5).unwrap();
    assert!(img.pixels.iter().all(|&p| (0.0..=NOISE_AMPLITUDE).contains(&p)));
    let corpus = generate_corpus(400, 32, 3).unwrap();
    let negative = corpus.iter().find(|p| p.labels.iter().all(|&l| !l)).unwrap();
    assert!(negative.image.pixels.iter().all(|&p| p <= NOISE_AMPLITUDE));
    let parsed = parse_report(&negative.report).unwrap();
    assert!(parsed.labels.iter().all(|&l| !l));
    assert!(!negative.report.contains("mild") && !negative.report.contains("sever"));
}

#[test]
fn positive_rate_is_balanced_over_10k() {
    let corpus = generate_corpus(10_000, 16, 99).unwrap();
    for f in 0..FINDINGS {
        let rate = corpus.iter().filter(|p| p.labels[f]).count() as f64 / corpus.len() as f64;
        assert!((0.45..=0.55).contains(&rate), "finding {f}: {rate}");
    }
}

#[test]
fn labels_match_reports() {
    for p in generate_corpus(2000, 16, 7).unwrap() {
        let parsed = parse_report(&p.report).unwrap();
        assert_eq!(parsed.labels, p.labels, "{}", p.report);
        for f in 0..FINDINGS {
            if p.labels[f] {
                assert_eq!(parsed.severe[f], p.severe[f]);
            }
        }
    }
}

#[test]
fn reports_tokenize_without_unk() {
    let pipeline = TextPipeline::default();
    let vocab = pipeline.tokenizer.vocab();
    for p in generate_corpus(500, 16, 8).unwrap() {
        let r = pipeline.process(&p.report).unwrap();
        assert!(r.subword_ids(vocab).iter().all(|&id| id != UNK_ID), "{}", p.report);
    }
}

#[test]
fn distinct_findings_are_far_apart() {
    let side = 32;
    let noise_norm = NOISE_AMPLITUDE * side as f64;
    let corpus = generate_corpus(60, side, 12).unwrap();
    let glyphs: Vec<Vec<bool>> = corpus
        .iter()
        .map(|p| {
            let masks: Vec<Vec<bool>> = (0..FINDINGS).map(|f| glyph_mask(f, p.severe[f], side)).collect();
            (0..side * side).map(|k| (0..FINDINGS).any(|f| p.labels[f] && masks[f][k])).collect()
        })
        .collect();
    for (i, a) in corpus.iter().enumerate() {
        for (j, b) in corpus.iter().enumerate().skip(i + 1) {
            if a.labels == b.labels {
                continue;
            }
            let differing = (0..side * side).filter(|&k| glyphs[i][k] != glyphs[j][k]).count();
            let energy = GLYPH_INTENSITY * GLYPH_INTENSITY * differing as f64;
            assert!(differing > 0);
            let dist = a.image.l2_distance(&b.image);
            assert!(dist > energy.sqrt() - 2.0 * noise_norm);
            // per pixel the noise can hide at most NOISE_AMPLITUDE of a glyph
            let floor = (GLYPH_INTENSITY - NOISE_AMPLITUDE - 1e-4) * (differing as f64).sqrt();
            assert!(dist >= floor, "{dist} < {floor}");
        }
    }
}

#[test]
fn glyphs_stay_in_their_quadrants() {
    let side = 32;
    for f in 0..FINDINGS {
        for severe in [false, true] {
            let mask = glyph_mask(f, severe, side);
            assert!(mask.iter().any(|&m| m));
            let (qy, qx) = [(0, 0), (1, 0), (0, 1), (1, 1)][f];
            for (k, &m) in mask.iter().enumerate() {
                if m {
                    assert_eq!((k / side) / (side / 2), qy);
                    assert_eq!((k % side) / (side / 2), qx);
                }
            }
        }
        let mild = glyph_mask(f, false, side).iter().filter(|&&m| m).count();
        let severe = glyph_mask(f, true, side).iter().filter(|&&m| m).count();
        assert!(severe > mild);
    }
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(5, 32, 4).unwrap();
    save_corpus(dir.path(), &corpus).unwrap();
    assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
    assert!(load_corpus(&dir.path().join("missing")).is_err());
}
