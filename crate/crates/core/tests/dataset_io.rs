use aimdt::datagen::{
    compute_stats, encode_dataset, gen_collision, gen_collision_free, mix, read_dataset, write_dataset, Dataset,
    Source,
};
use aimdt::world::LayoutKind;
use aimdt::{Error, RunConfig};

fn cfg(n: usize) -> RunConfig {
    let mut c = RunConfig::builtin();
    c.scenario.n_vehicles = n;
    c
}

fn sample() -> Dataset {
    let c = cfg(3);
    let free = gen_collision_free(&c, 1, 11).unwrap();
    let coll = gen_collision(&c, 10, 12).unwrap();
    mix(&free, &coll, 0.125, 13).unwrap()
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.bin");
    let ds = sample();
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path, Some(&cfg(3).data_hash())).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.manifest.hash(), ds.manifest.hash());
    assert_eq!(std::fs::read(&path).unwrap(), encode_dataset(&back));
    for ep in &back.episodes {
        ep.validate(1e-4).unwrap();
    }
}

#[test]
fn stats_recompute_from_loaded_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.bin");
    write_dataset(&sample(), &path).unwrap();
    let back = read_dataset(&path, None).unwrap();
    let s = compute_stats(&back.episodes, back.state_dim());
    assert!((s.return_mean - back.manifest.return_mean).abs() < 1e-6);
    for (a, b) in s.state_mean.iter().zip(&back.manifest.state_mean) {
        assert!((a - b).abs() < 1e-6);
    }
    for (a, b) in s.state_std.iter().zip(&back.manifest.state_std) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn generation_is_reproducible_across_thread_counts() {
    let c = cfg(3);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let a = one.install(|| encode_dataset(&gen_collision_free(&c, 1, 5).unwrap()));
    let b = three.install(|| encode_dataset(&gen_collision_free(&c, 1, 5).unwrap()));
    assert_eq!(a, b);
    let a = one.install(|| encode_dataset(&gen_collision(&c, 7, 5).unwrap()));
    let b = three.install(|| encode_dataset(&gen_collision(&c, 7, 5).unwrap()));
    assert_eq!(a, b);
}

#[test]
fn truncated_file_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.bin");
    let ds = sample();
    let bytes = encode_dataset(&ds);
    std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
    let last = ds.len() - 1;
    match read_dataset(&path, None) {
        Err(Error::Dataset(msg)) => assert!(msg.contains(&format!("record {last}")), "{msg}"),
        other => panic!("expected a dataset error, got {other:?}"),
    }
}

#[test]
fn corrupt_record_and_bad_header_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.bin");
    let ds = sample();
    let mut bytes = encode_dataset(&ds);
    let n = bytes.len();
    bytes[n - 30] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(&path, None), Err(Error::Dataset(m)) if m.contains("checksum")));

    let mut bytes = encode_dataset(&ds);
    bytes[8] = 9;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(&path, None), Err(Error::Dataset(m)) if m.contains("version")));

    std::fs::write(&path, encode_dataset(&ds)).unwrap();
    assert!(matches!(read_dataset(&path, Some("deadbeef")), Err(Error::Dataset(_))));

    let mut extra = encode_dataset(&ds);
    extra.extend_from_slice(&[0; 3]);
    std::fs::write(&path, &extra).unwrap();
    assert!(read_dataset(&path, None).is_err());
}

#[test]
fn empty_dataset_is_a_valid_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.bin");
    let ds = Dataset::new("abc", 0, Source::Aim, LayoutKind::FourWay, 5, 0.1, vec![]).unwrap();
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path, Some("abc")).unwrap();
    assert!(back.is_empty());
    assert_eq!(back, ds);
}

#[test]
fn mixed_collision_fraction_is_exact() {
    let ds = sample();
    // 4^3 free episodes and floor(0.125 * 64) = 8 collisions.
    assert_eq!(ds.manifest.n_collision_free, 64);
    assert_eq!(ds.manifest.n_collision, 8);
    assert_eq!(ds.episodes.iter().filter(|e| e.collided()).count(), 8);
    assert_eq!(ds.manifest.mix_ratio, Some(0.125));
}
