use criterion::{criterion_group, criterion_main, Criterion};

use badgecause::synth::{simulate_cohort, SynthSpec};
use badgecause::{bootstrap_test, validate_dataset, Model, Rate, StudyConfig};

fn bootstrap(c: &mut Criterion) {
    let spec = SynthSpec {
        seed: 2,
        ..SynthSpec::default()
    };
    c.bench_function("simulate_cohort_10k", |b| {
        b.iter(|| simulate_cohort(&spec).unwrap())
    });

    let data = validate_dataset(simulate_cohort(&spec).unwrap(), spec.horizon)
        .unwrap()
        .dataset;
    let mut group = c.benchmark_group("bootstrap_200_controls");
    for model in [Model::Basic, Model::Robust] {
        let config = StudyConfig {
            model,
            rate: Rate::Fixed(10.0),
            ..StudyConfig::new(180.0, 360.0)
        };
        group.bench_function(model.to_string(), |b| {
            b.iter(|| bootstrap_test(&data, &config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bootstrap);
criterion_main!(benches);
