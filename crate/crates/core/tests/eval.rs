use std::collections::HashMap;

use inpaint_core::corrosion::{apply_corrosion, Fill};
use inpaint_core::datagen::{generate_dataset, DatasetConfig, DatasetRecord, TextStyle};
use inpaint_core::eval::*;
use inpaint_core::imgcore::{write_png, ImageTensor, MaskBitmap, ValueRange};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor<f64> {
    ImageTensor::new(h, w, c, ValueRange::Unit, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn naive_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    -10.0 * (se / a.len() as f64).log10()
}

/// Direct 2-D weighted window statistics at every valid position.
fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i][j] / total;
                    ma += k * a[(y + i) * w + x + j];
                    mb += k * b[(y + i) * w + x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i][j] / total;
                    let (da, db) = (a[(y + i) * w + x + j] - ma, b[(y + i) * w + x + j] - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn psnr_and_ssim_match_direct_implementations() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..100 {
        let (h, w) = (11 + i % 9, 11 + (i * 7) % 23);
        let a = random_image(&mut rng, h, w, 1);
        // correlated partner so SSIM is not near zero
        let noise = rng.random_range(0.01..0.5);
        let b = ImageTensor::from_clamped(h, w, 1, ValueRange::Unit, a.data().iter().map(|v| v + noise * (rng.random::<f64>() - 0.5)).collect()).unwrap();
        assert!((psnr(&a, &b).unwrap() - naive_psnr(a.data(), b.data())).abs() <= 1e-9);
        let s = ssim(&a, &b).unwrap();
        assert!((s - naive_ssim(a.data(), b.data(), h, w)).abs() <= 1e-6, "pair {i}");
        assert!((s - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() == 0.0);
    }
}

#[test]
fn metric_closed_forms() {
    let a = ImageTensor::<f64>::filled(32, 32, 3, ValueRange::Unit, 0.25).unwrap();
    let b = ImageTensor::<f64>::filled(32, 32, 3, ValueRange::Unit, 0.35).unwrap();
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    let zero = ImageTensor::<f64>::filled(16, 16, 1, ValueRange::Unit, 0.0).unwrap();
    let one = ImageTensor::<f64>::filled(16, 16, 1, ValueRange::Unit, 1.0).unwrap();
    assert!((ssim(&zero, &one).unwrap() - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = random_image(&mut rng, 20, 30, 3);
    assert!((ssim(&r, &r).unwrap() - 1.0).abs() < 1e-9);
}

fn dp_oracle(p: &[char], g: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if p.is_empty() {
        return g.len();
    }
    if g.is_empty() {
        return p.len();
    }
    if let Some(&v) = memo.get(&(p.len(), g.len())) {
        return v;
    }
    let (pl, gl) = (p.len() - 1, g.len() - 1);
    let v = (dp_oracle(&p[..pl], &g[..gl], memo) + (p[pl] != g[gl]) as usize)
        .min(dp_oracle(&p[..pl], g, memo) + 1)
        .min(dp_oracle(p, &g[..gl], memo) + 1);
    memo.insert((p.len(), g.len()), v);
    v
}

fn oracle_ed(p: &str, g: &str) -> usize {
    dp_oracle(&p.chars().collect::<Vec<_>>(), &g.chars().collect::<Vec<_>>(), &mut HashMap::new())
}

#[test]
fn kitten_sitting() {
    assert_eq!(edit_distance("kitten", "sitting"), 3);
    assert_eq!(oracle_ed("kitten", "sitting"), 3);
    assert!((char_acc(&["kitten"], &["sitting"]).unwrap() - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
    assert_eq!(char_acc(&["abc", "xy"], &["abc", "xy"]).unwrap(), 1.0);
    assert_eq!(char_acc(&[""], &["abc"]).unwrap(), 0.0);
    assert_eq!(word_acc(&["abc", "xyz"], &["abc", "xy"]).unwrap(), 50.0);
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn edit_distance_matches_oracle_and_is_a_metric(p in "[a-cA-C]{0,8}", g in "[a-cA-C]{0,8}", q in "[a-c]{0,6}") {
        let d = edit_distance(&p, &g);
        prop_assert_eq!(d, oracle_ed(&p, &g));
        prop_assert_eq!(d, edit_distance(&g, &p));
        prop_assert_eq!(edit_distance(&p, ""), p.chars().count());
        prop_assert!(d <= edit_distance(&p, &q) + edit_distance(&q, &g));
    }

    #[test]
    fn accuracies_are_bounded(pairs in prop::collection::vec(("[a-dA-D]{0,5}", "[a-dA-D]{0,5}"), 1..12)) {
        let (p, g): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        let c = char_acc(&p, &g).unwrap();
        let w = word_acc(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((0.0..=100.0).contains(&w));
        if w == 100.0 {
            prop_assert_eq!(c, 1.0);
        }
    }
}

fn dataset(n: usize, seed: u64) -> Vec<DatasetRecord> {
    generate_dataset(&DatasetConfig {
        records: n,
        height: 32,
        width: 128,
        style: TextStyle::Scene,
        data_seed: seed,
        ..Default::default()
    })
    .unwrap()
}

/// Fills the left half of the ink bounding box, destroying about half the text.
fn destroy_half(rec: &DatasetRecord) -> ImageTensor<f32> {
    let seg = &rec.intact_segmask;
    let (h, w) = (seg.height(), seg.width());
    let cols: Vec<usize> = (0..w).filter(|&x| (0..h).any(|y| seg.get(y, x) > 0.5)).collect();
    let (x0, x1) = (cols[0], *cols.last().unwrap());
    let mid = (x0 + x1) / 2;
    let mut m = MaskBitmap::zeros(h, w);
    for y in 0..h {
        for x in x0..=mid {
            m.set(y, x, true);
        }
    }
    let fill = if rec.fill == Fill::Black { Fill::Black } else { Fill::White };
    apply_corrosion(&rec.intact_image, &m, fill).unwrap()
}

#[test]
fn toy_recognizer_reads_intact_and_degrades_on_damage() {
    let recs = dataset(100, 3);
    let r = ToyTemplateRecognizer::new();
    let gts: Vec<&str> = recs.iter().map(|x| x.text_label.as_str()).collect();
    let intact: Vec<String> = recs.iter().map(|x| r.recognize(&x.intact_image)).collect();
    let damaged: Vec<String> = recs.iter().map(|x| r.recognize(&destroy_half(x))).collect();
    let (ci, cd) = (char_acc(&intact, &gts).unwrap(), char_acc(&damaged, &gts).unwrap());
    println!("intact char_acc {ci:.4} word_acc {:.1}; damaged {cd:.4}", word_acc(&intact, &gts).unwrap());
    assert!(ci > 0.95);
    assert!(cd < ci);
}

#[test]
fn evaluation_reports() {
    let recs = dataset(40, 4);
    let refs: Vec<&DatasetRecord> = recs.iter().collect();
    let rec = ToyTemplateRecognizer::new();
    let norm = TextNormalization::default();

    let gt = evaluate_with(&refs, |r| Ok(r.intact_image.clone()), &rec, &norm).unwrap();
    assert_eq!(gt.psnr_mean, 100.0);
    assert!((gt.ssim_mean - 1.0).abs() < 1e-9);
    let texts: Vec<String> = recs.iter().map(|r| rec.recognize(&r.intact_image)).collect();
    let labels: Vec<&str> = recs.iter().map(|r| r.text_label.as_str()).collect();
    assert_eq!(gt.word_acc, word_acc(&texts, &labels).unwrap());

    let base = evaluate_corrupted(&refs, &rec, &norm).unwrap();
    let ident = evaluate_with(&refs, |r| Ok(r.corrupted_image.clone()), &rec, &norm).unwrap();
    assert_eq!(base, ident);
    assert!(base.psnr_mean < gt.psnr_mean && base.ssim_mean < gt.ssim_mean);
    assert!((-1.0..=1.0).contains(&base.ssim_mean));
    assert_eq!(base.by_form.iter().map(|b| b.count).sum::<usize>(), 40);
    assert_eq!(base.by_ratio.iter().map(|b| b.count).sum::<usize>(), 40);
    assert_eq!(base.by_ratio[1].name, "20-40%");

    let mut shuffled = refs.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    assert_eq!(evaluate_corrupted(&shuffled, &rec, &norm).unwrap(), base);

    assert_eq!(EvalReport::from_json(&base.to_json().unwrap()).unwrap(), base);
    let table = base.table("corrupted");
    assert!(table.contains("corrupted") && table.contains("  QD") && table.contains("40-60%"));
}

#[test]
fn directory_evaluation_reports_missing_files() {
    let recs = dataset(6, 5);
    let refs: Vec<&DatasetRecord> = recs.iter().collect();
    let dir = tempfile::tempdir().unwrap();
    for r in &recs[..4] {
        write_png(dir.path().join(inpainted_file(&r.id)), &r.intact_image).unwrap();
    }
    let rep = evaluate(&refs, dir.path(), &ToyTemplateRecognizer::new(), &TextNormalization::default()).unwrap();
    assert_eq!((rep.scored, rep.failed), (4, 2));
    assert!(rep.rows.iter().filter(|r| r.error.is_some()).all(|r| recs[4..].iter().any(|x| x.id == r.id)));
    // 8-bit storage: per-pixel error at most half a code, 1/510
    assert!(rep.psnr_mean >= 20.0 * 510f64.log10(), "{}", rep.psnr_mean);
}

#[test]
fn external_transcripts_drive_accuracy() {
    let recs = dataset(4, 6);
    let refs: Vec<&DatasetRecord> = recs.iter().collect();
    let mut text = String::new();
    for (i, r) in recs.iter().enumerate() {
        let t = if i % 2 == 0 { r.text_label.to_uppercase() } else { "zzz".to_string() };
        text.push_str(&format!("{}\t{}\n", r.id, t));
    }
    let ext = ExternalTranscriptFile::parse(&text).unwrap();
    let rep = evaluate_with(&refs, |r| Ok(r.intact_image.clone()), &ext, &TextNormalization::default()).unwrap();
    assert_eq!(rep.word_acc, 50.0);
    let strict = TextNormalization { lowercase: false, alnum_only: false };
    let rep = evaluate_with(&refs, |r| Ok(r.intact_image.clone()), &ext, &strict).unwrap();
    assert!(rep.word_acc <= 50.0);
}
