use std::hint::black_box;

use creakbench::acoustics::extract_features;
use creakbench::audio::{synth_glottal, GlottalSpec};
use creakbench::pitch::estimate_contour;
use creakbench::psola::shift_pitch;
use creakbench::PitchRange;
use criterion::{criterion_group, criterion_main, Criterion};

fn dsp(c: &mut Criterion) {
    let clip = synth_glottal(&GlottalSpec::with_creakiness(120.0, 0.3), 1.0, 16_000, 0).unwrap();
    let range = PitchRange::default();
    let contour = estimate_contour(&clip, &range).unwrap();
    let target = contour.scaled(1.5);

    c.bench_function("yin contour 1s", |b| b.iter(|| estimate_contour(black_box(&clip), &range).unwrap()));
    c.bench_function("psola +7st 1s", |b| b.iter(|| shift_pitch(black_box(&clip), &contour, &target).unwrap()));
    c.bench_function("voice features 1s", |b| b.iter(|| extract_features(black_box(&clip)).unwrap()));
}

criterion_group!(benches, dsp);
criterion_main!(benches);
