use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;

use sketch_overlap::linalg::{gaussian_matrix, seeded_rng};
use sketch_overlap::{create_layout, Error, MatrixStore};

#[test]
fn disjoint_parallel_writes_match_sequential_store() {
    let (rows, cols, chunk) = (37, 96, 7);
    let data = gaussian_matrix(&mut seeded_rng(11, 0), rows, cols);
    let dir = tempfile::tempdir().unwrap();

    let sequential = create_layout(&dir.path().join("seq"), rows, cols, chunk, false, BTreeMap::new()).unwrap();
    sequential.write_columns(0, &data).unwrap();

    // Ranges of width 5 straddle chunk boundaries, so threads share chunk files.
    let parallel = Arc::new(create_layout(&dir.path().join("par"), rows, cols, chunk, false, BTreeMap::new()).unwrap());
    let ranges: Vec<(usize, usize)> = (0..cols).step_by(5).map(|s| (s, 5.min(cols - s))).collect();
    let workers: Vec<_> = (0..4)
        .map(|w| {
            let store = Arc::clone(&parallel);
            let data = data.clone();
            let mine: Vec<_> = ranges.iter().copied().skip(w).step_by(4).collect();
            thread::spawn(move || {
                for (start, width) in mine {
                    store.write_columns(start, &data.columns(start, width).clone_owned()).unwrap();
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }

    let expected = sequential.read_all().unwrap();
    let got = parallel.read_all().unwrap();
    assert!(got.iter().zip(expected.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(parallel.verify().unwrap().is_empty());

    for chunk_id in 0..parallel.chunks().len() {
        let name = format!("chunk-{chunk_id:05}.bin");
        assert_eq!(
            std::fs::read(dir.path().join("seq").join(&name)).unwrap(),
            std::fs::read(dir.path().join("par").join(&name)).unwrap()
        );
    }
}

#[test]
fn incomplete_store_cannot_be_finalized_or_merged() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = create_layout(&dir.path().join("s"), 4, 9, 3, false, BTreeMap::new()).unwrap();
    store.write_columns(0, &gaussian_matrix(&mut seeded_rng(1, 0), 4, 3)).unwrap();
    store.write_columns(6, &gaussian_matrix(&mut seeded_rng(1, 1), 4, 3)).unwrap();
    assert!(matches!(store.merge(&dir.path().join("m.bin"), false), Err(Error::Integrity { chunk: 1, .. })));
    assert!(store.finalize().is_err());
    assert!(!dir.path().join("m.bin").exists());

    let reopened = MatrixStore::open(&dir.path().join("s")).unwrap();
    let issues = reopened.verify().unwrap();
    assert_eq!(issues.len(), 1);
    assert_eq!(issues[0].chunk, 1);
}
