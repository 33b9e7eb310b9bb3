use convbasis::data::{augment, class_template, load_cifar10, parse_cifar_records, synth_dataset, synth_dataset_with, AugmentPolicy, SynthConfig};
use convbasis::rng::SeededRng;

const RECORD: usize = 3073;

/// `per_class` records per class, label-cycled, with pixel bytes derived
/// from the record index.
fn cifar_bytes(per_class: usize, salt: u8) -> Vec<u8> {
    let mut out = Vec::new();
    for i in 0..per_class * 10 {
        out.push((i % 10) as u8);
        out.extend((0..RECORD - 1).map(|p| ((i * 7 + p) as u8).wrapping_add(salt)));
    }
    out
}

#[test]
fn cifar_directory_with_cap() {
    let dir = tempfile::tempdir().unwrap();
    for b in 1..=5 {
        std::fs::write(dir.path().join(format!("data_batch_{b}.bin")), cifar_bytes(3, b)).unwrap();
    }
    std::fs::write(dir.path().join("test_batch.bin"), cifar_bytes(2, 0)).unwrap();
    let (train, valid) = load_cifar10(dir.path(), Some(10)).unwrap();
    assert_eq!(train.len(), 100);
    assert_eq!(valid.len(), 20);
    // File order: the first three batches fill the cap of 10 except one.
    assert_eq!(train.source_index[..3], [0, 1, 2]);
    assert!(train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let (full, _) = load_cifar10(dir.path(), None).unwrap();
    assert_eq!(full.len(), 150);
    // Byte round trip of one batch.
    let bytes = cifar_bytes(3, 1);
    let back = convbasis::data::encode_cifar_records(&full.subset(&(0..30).collect::<Vec<_>>())).unwrap();
    assert_eq!(back, bytes);
}

#[test]
fn cifar_errors_carry_offsets() {
    assert!(matches!(parse_cifar_records(&[0u8; 3072]), Err(convbasis::Error::Format { offset: 0, .. })));
    let mut bytes = cifar_bytes(1, 0);
    bytes[2 * RECORD] = 12;
    match parse_cifar_records(&bytes) {
        Err(convbasis::Error::Format { offset, message }) => {
            assert_eq!(offset, 2 * RECORD as u64);
            assert!(message.contains("record 2"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn noiseless_template_classifier_is_perfect() {
    let mut cfg = SynthConfig::new(6, 5, 12, 3);
    cfg.noise = 0.0;
    let (train, valid) = synth_dataset_with(&cfg).unwrap();
    let templates: Vec<_> = (0..5).map(|c| class_template(c, 5, 12)).collect();
    for ds in [&train, &valid] {
        let per = 3 * 12 * 12;
        for (i, &label) in ds.labels.iter().enumerate() {
            let img = &ds.images.data()[i * per..(i + 1) * per];
            let best = (0..5)
                .min_by(|&a, &b| {
                    let d = |c: usize| templates[c].data().iter().zip(img).map(|(t, x)| (t - x).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(best, label);
        }
    }
}

#[test]
fn splits_are_disjoint_and_balanced() {
    let (train, valid) = synth_dataset(10, 4, 8, 1).unwrap();
    let mut idx: Vec<usize> = train.source_index.iter().chain(&valid.source_index).copied().collect();
    idx.sort_unstable();
    assert_eq!(idx, (0..40).collect::<Vec<_>>());
    let mut counts = [0; 4];
    for &l in train.labels.iter().chain(&valid.labels) {
        counts[l] += 1;
    }
    assert_eq!(counts, [10; 4]);
}

#[test]
fn augmentation_keeps_pixel_range() {
    let (train, _) = synth_dataset(4, 3, 32, 2).unwrap();
    let (x, _) = train.batch(&(0..8).collect::<Vec<_>>());
    let mut rng = SeededRng::new(0);
    for policy in [AugmentPolicy::None, AugmentPolicy::Pad4Crop32Flip, AugmentPolicy::ResizeCrop { resize_to: 40, crop_to: 32 }] {
        let y = augment(&x, &policy, rng.next_u64()).unwrap();
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{policy:?}");
        assert_eq!(y, augment(&x, &policy, y.data().len() as u64).map(|_| y.clone()).unwrap());
    }
}
