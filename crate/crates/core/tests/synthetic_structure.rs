use proptest::prelude::*;
use roadattr_core::dataset::{load_dataset, write_dataset, Split, TemporalKind};
use roadattr_core::eval::cooccurrence;
use roadattr_core::synthgen::{Generator, GeneratorConfig};

fn small(seed: u64, noise: f64) -> GeneratorConfig {
    GeneratorConfig {
        num_sections: 10,
        segments_per_section: 40,
        noise_std: noise,
        seed,
        ..GeneratorConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_peak_truth_never_leaves_default(seed in any::<u64>(), noise in 0.0f64..2.0) {
        let ds = Generator::new(small(seed, noise)).unwrap().generate().unwrap();
        ds.manifest().splits.validate_disjoint().unwrap();
        for (a, spec) in ds.attributes().iter().enumerate() {
            if spec.temporal_kind != TemporalKind::SinglePeak {
                continue;
            }
            let labels: Vec<Vec<usize>> = ds.sections().iter().map(|s| ds.section_labels(s, a)).collect();
            let m = cooccurrence(spec.num_classes(), labels.iter().map(Vec::as_slice)).unwrap();
            prop_assert_eq!(m.mass_outside(spec.default_class.unwrap()), 0);
        }
    }
}

#[test]
fn splits_cover_every_section_once() {
    let ds = Generator::new(small(3, 0.5)).unwrap().generate().unwrap();
    let mut seen: Vec<&str> = [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .flat_map(|s| ds.manifest().splits.get(s).iter().map(String::as_str))
        .collect();
    seen.sort();
    let mut all: Vec<&str> = ds.manifest().sections.iter().map(|s| s.id.as_str()).collect();
    all.sort();
    assert_eq!(seen, all);
}

#[test]
fn default_taxonomy_is_imbalanced() {
    let ds = Generator::new(GeneratorConfig::default()).unwrap().generate().unwrap();
    let rarest = ds
        .attributes()
        .iter()
        .flat_map(|a| {
            let counts = ds.class_frequencies(Split::Train, &a.name).unwrap();
            (0..a.num_classes()).map(move |c| counts.frequency(c))
        })
        .fold(f64::INFINITY, f64::min);
    assert!(rarest <= 0.02, "rarest class frequency {rarest}");
    assert_eq!(ds.split_indices(Split::Train).len(), 8000);
    assert_eq!(ds.split_indices(Split::Val).len(), 1000);
    assert_eq!(ds.split_indices(Split::Test).len(), 1000);
}

#[test]
fn dataset_survives_disk_round_trip() {
    let ds = Generator::new(small(9, 0.7)).unwrap().generate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), ds);
}

#[test]
fn generation_is_seeded() {
    let a = Generator::new(small(5, 0.6)).unwrap().generate().unwrap();
    let b = Generator::new(small(5, 0.6)).unwrap().generate().unwrap();
    let c = Generator::new(small(6, 0.6)).unwrap().generate().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
