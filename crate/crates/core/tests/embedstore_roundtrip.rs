use proptest::prelude::*;

use sbcp::embedstore::{
    read_class_features, read_dataset, validate_dataset, write_class_features, write_dataset, ClassTable, Dataset,
    EmbeddingRecord, Location, HEADER_LEN,
};
use sbcp::Error;

/// Non-zero vectors of f32-representable values, so the disk round trip is exact.
fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f32..4.0, d)
        .prop_filter("non-zero", |v| v.iter().any(|&x| x != 0.0))
        .prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..6, 2usize..5, 0usize..3, 1usize..3, 0usize..5).prop_flat_map(|(d, k, h, w, n)| {
        let regions = h * w;
        let classes = prop::collection::vec(vector(d), k);
        let records = prop::collection::vec(
            (0..k, vector(d), prop::collection::vec(vector(d), regions)).prop_map(|(label, global, locals)| {
                EmbeddingRecord {
                    label,
                    global,
                    locals: locals.concat(),
                }
            }),
            n.max(1),
        );
        (classes, records, any::<bool>()).prop_map(move |(classes, records, normalized)| {
            let grid = (h > 0).then_some((h, w));
            Dataset::new(ClassTable::from_rows(&classes).unwrap(), records, grid, normalized).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bytes_roundtrip(ds in dataset()) {
        let bytes = ds.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), ds.header.file_len().unwrap());
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn any_truncation_is_a_format_error(ds in dataset(), cut in 0.0f64..1.0) {
        let bytes = ds.to_bytes().unwrap();
        let keep = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(matches!(Dataset::from_bytes(&bytes[..keep]), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_rejected(ds in dataset(), extra in 1usize..9) {
        let mut bytes = ds.to_bytes().unwrap();
        bytes.extend(std::iter::repeat_n(0u8, extra));
        prop_assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(_))));
    }
}

#[test]
fn file_roundtrip_and_text_features() {
    let dir = tempfile::tempdir().unwrap();
    let classes = ClassTable::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.25]]).unwrap();
    let ds = Dataset::new(
        classes.clone(),
        vec![EmbeddingRecord {
            label: 1,
            global: vec![0.5, -1.0],
            locals: vec![1.0, 1.0, -2.0, 0.125],
        }],
        Some((1, 2)),
        false,
    )
    .unwrap();
    let p = dir.path().join("d.sbcp");
    write_dataset(&ds, &p).unwrap();
    assert_eq!(read_dataset(&p).unwrap(), ds);

    let t = dir.path().join("text.sbcp");
    write_class_features(&classes, &t).unwrap();
    assert_eq!(std::fs::read(&t).unwrap().len(), HEADER_LEN + 2 * 2 * 4);
    assert_eq!(read_class_features(&t).unwrap(), classes);
    // an empty training set is not a dataset
    assert!(matches!(read_dataset(&t), Err(Error::Format(_))));
}

#[test]
fn nan_and_zero_vectors_are_located() {
    let classes = ClassTable::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let mut ds = Dataset::new(
        classes,
        vec![
            EmbeddingRecord {
                label: 0,
                global: vec![1.0, 0.0],
                locals: vec![1.0, 0.0, 0.0, 1.0],
            };
            3
        ],
        Some((2, 1)),
        true,
    )
    .unwrap();
    ds.records[1].locals[2] = 0.0;
    ds.records[1].locals[3] = 0.0;
    ds.records[2].global[1] = f64::NAN;
    let report = validate_dataset(&ds);
    assert_eq!(report.len(), 2);
    assert_eq!(report.records(), vec![1, 2]);
    assert_eq!(report.violations[0].location, Location::Local { record: 1, region: 1 });
    let bytes = ds.to_bytes().unwrap();
    match Dataset::from_bytes(&bytes) {
        Err(Error::Data(msg)) => assert!(msg.contains("record 1 region 1") && msg.contains("record 2 global")),
        other => panic!("expected a data error, got {other:?}"),
    }
}
