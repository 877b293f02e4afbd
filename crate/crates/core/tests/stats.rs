use std::path::Path;

use fpf::data::{load_frame, synth_generate, ArtifactKind, DatasetManifest, SynthConfig, CANVAS};
use fpf::grid::Grid;
use fpf::masks::{region_mask_full, MaskParams, RegionId};
use fpf::rgb::RgbImage;
use fpf::stats::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_vec(w, h, (0..w * h * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn diff_map_symmetric_zero_and_bounded(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(w, h, &mut rng);
        let b = random_image(w, h, &mut rng);
        let mask = Grid::from_vec(h, w, (0..w * h).map(|i| if i % 3 == 0 { 0.0 } else { rng.random() }).collect());
        let ab = diff_map(&a, &b, &mask, RegionId::Eyes).unwrap();
        let ba = diff_map(&b, &a, &mask, RegionId::Eyes).unwrap();
        prop_assert_eq!(&ab.values, &ba.values);
        let aa = diff_map(&a, &a, &mask, RegionId::Eyes).unwrap();
        prop_assert!(aa.values.as_slice().iter().all(|&v| v == 0.0));
        for (i, (&d, &m)) in ab.values.as_slice().iter().zip(mask.as_slice()).enumerate() {
            let (x, y) = (i % w, i / w);
            let (pa, pb) = (a.pixel(x, y), b.pixel(x, y));
            let oracle = m * ((pa[0] - pb[0]).abs() as f64 + (pa[1] - pb[1]).abs() as f64 + (pa[2] - pb[2]).abs() as f64) / 3.0;
            prop_assert!((d - oracle).abs() < 1e-12);
            prop_assert!(d <= m);
            if m == 0.0 {
                prop_assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn histogram_counts_are_additive(values in prop::collection::vec(0.0f64..1.0, 0..200), split in 0usize..200) {
        let split = split.min(values.len());
        let mut whole = RegionHistogram::new(RegionId::Chin, 50).unwrap();
        values.iter().for_each(|&v| whole.add(v));
        let mut a = RegionHistogram::new(RegionId::Chin, 50).unwrap();
        let mut b = a.clone();
        values[..split].iter().for_each(|&v| a.add(v));
        values[split..].iter().for_each(|&v| b.add(v));
        a.merge(&b).unwrap();
        prop_assert_eq!(&a, &whole);
        prop_assert_eq!(whole.total(), values.len() as u64);
    }
}

fn corpus(dir: &Path, kind: ArtifactKind, amplitude: f64) -> DatasetManifest {
    let mut c = SynthConfig::new(6, &[RegionId::Mouth], kind, amplitude);
    c.frames_per_video = 2;
    synth_generate(&c, 21, dir).unwrap()
}

#[test]
fn identical_pairs_give_zero_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), ArtifactKind::Noise, 0.2);
    // Point every fake at its own image path so both sides are identical.
    let mut records = m.records.clone();
    for r in records.iter_mut().filter(|r| r.label == 1) {
        let real = m.find(r.paired_real_frame_id.as_deref().unwrap()).unwrap();
        r.image_path = real.image_path.clone();
    }
    let m = DatasetManifest::new(m.provenance.clone(), records, m.root.clone()).unwrap();
    let all: Vec<_> = m.records.iter().collect();
    let pairs = resolve_pairs(&m, &all).unwrap();
    let stats = forensic_stats(&m, &pairs, &MaskParams::default(), 50, MaskWeighting::Soft).unwrap();
    assert!(stats.summary.rows.iter().all(|r| r.mean_abs_diff == 0.0));
    for h in &stats.histograms {
        assert_eq!(h.counts[0], h.total());
        assert!(h.total() > 0);
    }
}

#[test]
fn histogram_matches_brute_force_tally() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), ArtifactKind::Noise, 0.2);
    let all: Vec<_> = m.records.iter().collect();
    let fakes = one_frame_per_video(&all);
    assert_eq!(fakes.len(), 6);
    let pairs = resolve_pairs(&m, &fakes).unwrap();
    let params = MaskParams::default();
    for region in [RegionId::Mouth, RegionId::Nose] {
        let hist = region_histogram(&m, &pairs, region, &params, 20).unwrap();
        let mut counts = vec![0u64; 20];
        let mut contributing = 0u64;
        for p in &pairs {
            let fake = load_frame(&m, p.fake, None).unwrap();
            let real = load_frame(&m, p.real, None).unwrap();
            let mask = region_mask_full(&fake.landmarks, region, (CANVAS, CANVAS), &params).unwrap();
            for y in 0..CANVAS {
                for x in 0..CANVAS {
                    let mv = mask.get(y, x);
                    if mv <= 0.0 {
                        continue;
                    }
                    let (a, b) = (real.image.pixel(x, y), fake.image.pixel(x, y));
                    let d = (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum::<f64>() / 3.0 * mv;
                    counts[((d * 20.0) as usize).min(19)] += 1;
                    contributing += 1;
                }
            }
        }
        assert_eq!(hist.counts, counts, "{region}");
        assert_eq!(hist.total(), contributing);
    }
}

#[test]
fn unresolvable_pair_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), ArtifactKind::Noise, 0.2);
    let mut records = m.records.clone();
    let fake = records.iter_mut().find(|r| r.label == 1).unwrap();
    fake.paired_real_frame_id = Some("missing".into());
    let id = fake.frame_id.clone();
    let m = DatasetManifest::new(None, records, m.root.clone()).unwrap();
    let all: Vec<_> = m.records.iter().collect();
    match resolve_pairs(&m, &all) {
        Err(fpf::Error::Data(msg)) => assert!(msg.contains(&id), "{msg}"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("expected an error"),
    }
}

#[test]
fn masked_mean_ignores_pixels_outside_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_image(8, 8, &mut rng);
    let b = random_image(8, 8, &mut rng);
    let mask = Grid::from_vec(8, 8, (0..64).map(|i| if i < 20 { 0.5 } else { 0.0 }).collect());
    let mut b2 = b.clone();
    for i in 20..64 {
        b2.set_pixel(i % 8, i / 8, [0.0, 1.0, 0.0]);
    }
    let m1 = diff_map(&a, &b, &mask, RegionId::Nose).unwrap();
    let m2 = diff_map(&a, &b2, &mask, RegionId::Nose).unwrap();
    assert_eq!(m1.values, m2.values);
}
