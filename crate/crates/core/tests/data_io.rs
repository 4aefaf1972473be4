use std::fs;
use std::path::Path;

use cytopair::data::{
    load_dataset, parse_profile, read_manifest, read_png, read_profile, stratified_split_labels,
    write_manifest, write_png, write_profile, DatasetManifest, ImageRaster, ManifestEntry,
    ModalitySet, OpticalProfile, Split,
};
use cytopair::Error;
use proptest::prelude::*;

#[test]
fn empty_manifest_gives_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tsv");
    fs::write(&p, "").unwrap();
    assert!(read_manifest(&p).unwrap().entries.is_empty());
    assert!(load_dataset(&p).unwrap().is_empty());
}

#[test]
fn manifest_round_trip_keeps_split_and_missing_labels() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tsv");
    let m = DatasetManifest {
        entries: vec![
            ManifestEntry {
                id: "a".into(),
                image_path: "i/a.png".into(),
                profile_path: "p/a.tsv".into(),
                label: Some("x".into()),
            },
            ManifestEntry {
                id: "b".into(),
                image_path: "i/b.png".into(),
                profile_path: "p/b.tsv".into(),
                label: None,
            },
        ],
        split: Some(Split::Val),
    };
    write_manifest(&m, &p).unwrap();
    assert_eq!(read_manifest(&p).unwrap(), m);
}

#[test]
fn manifest_errors_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tsv");
    fs::write(&p, "a\ti.png\tp.tsv\tx\na\ti.png\tp.tsv\tx\n").unwrap();
    assert!(matches!(
        read_manifest(&p),
        Err(Error::Format { row: 2, .. })
    ));
    fs::write(&p, "a\ti.png\n").unwrap();
    assert!(matches!(
        read_manifest(&p),
        Err(Error::Format { row: 1, .. })
    ));
}

#[test]
fn five_column_profile_row_is_a_format_error() {
    let text = "1 2 3 4 5 6\n1 2 3 4 5\n";
    match parse_profile(text, Path::new("p.tsv")) {
        Err(Error::Format { row, .. }) => assert_eq!(row, 2),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn profile_separators_and_comments() {
    let p = parse_profile(
        "# FSC SSC ...\n1,2,3,4,5,6\n\n7\t8\t9\t10\t11\t12\n",
        Path::new("p"),
    )
    .unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!(p.channel(5), vec![6.0, 12.0]);
    assert!(parse_profile("# only a header\n", Path::new("p")).is_err());
    assert!(parse_profile("1 2 3 4 5 nan\n", Path::new("p")).is_err());
}

#[test]
fn file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageRaster::new(3, 5, (0..15).map(|v| v as u8 * 17).collect()).unwrap();
    write_png(&img, &dir.path().join("x.png")).unwrap();
    assert_eq!(read_png(&dir.path().join("x.png")).unwrap(), img);
    let prof = OpticalProfile::new(vec![[0.0, 1.5, 2.25, 1e-3, 12345.678, 0.1]; 4]).unwrap();
    write_profile(&prof, &dir.path().join("x.tsv")).unwrap();
    assert_eq!(read_profile(&dir.path().join("x.tsv")).unwrap(), prof);
}

#[test]
fn missing_image_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tsv");
    fs::write(&p, "a\tnope.png\tnope.tsv\tx\n").unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Io { .. })));
}

#[test]
fn invalid_rasters_rejected() {
    assert!(ImageRaster::new(0, 3, vec![]).is_err());
    assert!(ImageRaster::new(2, 2, vec![0; 3]).is_err());
    assert!(OpticalProfile::new(vec![]).is_err());
}

#[test]
fn split_examples() {
    let labels = vec![Some("a"); 100];
    let s = stratified_split_labels(&labels, (0.8, 0.05, 0.15), 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 5, 15));
    let s = stratified_split_labels(&labels, (1.0, 0.0, 0.0), 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (100, 0, 0));
}

#[test]
fn modality_set_strings() {
    for (s, m) in [
        ("I", ModalitySet::IMAGE),
        ("P", ModalitySet::PROFILE),
        ("I+P", ModalitySet::BOTH),
    ] {
        assert_eq!(s.parse::<ModalitySet>().unwrap(), m);
        assert_eq!(m.to_string(), s);
    }
    assert!("Q".parse::<ModalitySet>().is_err());
}

proptest! {
    #[test]
    fn split_is_a_stratified_partition(
        sizes in proptest::collection::vec(1usize..60, 1..5),
        seed in 0u64..1000,
        f in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        let names = ["a", "b", "c", "d", "e"];
        let labels: Vec<Option<&str>> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(Some(names[c])).take(n)).collect();
        let train = f.0;
        let val = (1.0 - train) * f.1;
        let fractions = (train, val, 1.0 - train - val);
        let s = stratified_split_labels(&labels, fractions, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        let again = stratified_split_labels(&labels, fractions, seed).unwrap();
        prop_assert_eq!(&again, &s);
        let active = [fractions.0, fractions.1, fractions.2].iter().filter(|v| **v > 0.0).count();
        for (c, &n) in sizes.iter().enumerate() {
            if n < active {
                continue;
            }
            let count = |ix: &[usize]| ix.iter().filter(|&&i| labels[i] == Some(names[c])).count() as f64;
            for (ix, frac) in [(&s.train, fractions.0), (&s.val, fractions.1), (&s.test, fractions.2)] {
                prop_assert!((count(ix) - frac * n as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn profile_text_round_trip(rows in proptest::collection::vec(proptest::array::uniform6(0.0f64..1e6), 1..30)) {
        let prof = OpticalProfile::new(rows).unwrap();
        let text = cytopair::data::format_profile(&prof);
        prop_assert_eq!(parse_profile(&text, Path::new("p")).unwrap(), prof);
    }
}
