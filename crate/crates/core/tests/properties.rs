use creakbench::adapt::{adapt_corpus, adapted_contour, semitone_delta, AdaptParams, GenderStats, ManifestRow};
use creakbench::audio::{read_wav, synth_glottal, write_wav, GlottalSpec};
use creakbench::creak::{CreakCalibration, Gender};
use creakbench::flow::{AttributeVector, CREAK_INDEX};
use creakbench::pitch::mean_pitch;
use creakbench::{AudioClip, PitchContour};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn contour_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 60.0f64..400.0], 1..80)
        .prop_filter("needs a voiced frame", |v| v.iter().any(|&f| f > 0.0))
}

proptest! {
    #[test]
    fn zero_shift_is_identity(f0 in contour_strategy(), m in 50.0f64..500.0, b in 0.0f64..6.0) {
        prop_assert_eq!(semitone_delta(m, m).unwrap(), 0.0);
        let c = PitchContour::new(0.01, 0.04, f0);
        prop_assert_eq!(adapted_contour(&c, 0.0, 0.0, b), c);
    }

    #[test]
    fn centring_hits_class_mean(f0 in contour_strategy(), class_mean in 80.0f64..300.0) {
        let c = PitchContour::new(0.01, 0.04, f0);
        let own = mean_pitch(&c).unwrap();
        let delta = semitone_delta(class_mean, own).unwrap();
        let out = mean_pitch(&adapted_contour(&c, delta, 0.0, 2.0)).unwrap();
        prop_assert!((out / class_mean - 1.0).abs() < 1e-9, "{out} vs {class_mean}");
        prop_assert_eq!(
            adapted_contour(&c, delta, 0.0, 2.0).f0_hz.iter().filter(|&&f| f > 0.0).count(),
            c.f0_hz.iter().filter(|&&f| f > 0.0).count()
        );
    }

    #[test]
    fn shift_creak_touches_one_coordinate(a in prop::array::uniform6(-2.0f64..2.0), beta in -1.25f64..1.25) {
        let v = AttributeVector::from_slice(&a).unwrap();
        let moved = v.shift_creak(beta).to_vec();
        for (i, (x, y)) in a.iter().zip(&moved).enumerate() {
            if i == CREAK_INDEX {
                prop_assert_eq!(*y, x + beta);
            } else {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn wav_round_trip_within_quantisation(samples in prop::collection::vec(-1.0f64..1.0, 1..2000)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let clip = AudioClip::new(samples, 16_000).unwrap();
        write_wav(&clip, &path).unwrap();
        let back = read_wav(&path).unwrap();
        prop_assert_eq!(back.len(), clip.len());
        let err = back.samples().iter().zip(clip.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 2f64.powi(-15), "{err}");
    }
}

#[test]
fn adapted_spread_matches_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for b in [1.0, 2.0, 4.0] {
        let st: Vec<f64> = (0..600)
            .map(|i| {
                let own = 90.0 + (i % 60) as f64;
                let c = PitchContour::new(0.01, 0.04, vec![own; 10]);
                let u: f64 = StandardNormal.sample(&mut rng);
                let out = adapted_contour(&c, semitone_delta(119.0, own).unwrap(), u, b);
                12.0 * (mean_pitch(&out).unwrap() / 119.0).log2()
            })
            .collect();
        let mean = st.iter().sum::<f64>() / st.len() as f64;
        let sd = (st.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (st.len() - 1) as f64).sqrt();
        assert!((sd / b - 1.0).abs() < 0.15, "b {b}: sd {sd}");
    }
}

fn corpus(dir: &std::path::Path) -> Vec<ManifestRow> {
    (0..6u64)
        .map(|i| {
            let (g, f0) = if i % 2 == 0 { (Gender::Male, 105.0) } else { (Gender::Female, 210.0) };
            let clip = synth_glottal(&GlottalSpec::with_creakiness(f0 + 3.0 * i as f64, 0.1 * i as f64), 0.5, 16_000, i).unwrap();
            let rel = format!("u{i}.wav");
            write_wav(&clip, dir.join(&rel)).unwrap();
            ManifestRow::new(&format!("u{i}"), rel, &format!("s{i}"), Some(g))
        })
        .collect()
}

#[test]
fn adapt_corpus_ignores_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let rows = corpus(dir.path());
    let params = AdaptParams {
        global_seed: 4,
        ..AdaptParams::default()
    };
    let run = |threads: usize| {
        let out = dir.path().join(format!("out{threads}"));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let outcome = pool
            .install(|| {
                adapt_corpus(&rows, dir.path(), &out, Some(GenderStats::preset()), &params, &CreakCalibration::default())
            })
            .unwrap();
        let wavs: Vec<Vec<u8>> = (0..6).map(|i| std::fs::read(out.join("audio").join(format!("u{i}.wav"))).unwrap()).collect();
        (outcome.records, wavs)
    };
    let (rec1, wav1) = run(1);
    let (rec3, wav3) = run(3);
    assert_eq!(rec1.len(), 6);
    assert_eq!(rec1, rec3);
    assert_eq!(wav1, wav3);
}
