use proptest::prelude::*;

use spankey::data::{encode_idx, gen_synthetic, parse_idx, Dataset};
use spankey::harness::{run_training, Checkpoint, ExperimentConfig};
use spankey::keyspace::{make_basis, BasisMatrix};

fn tiny() -> ExperimentConfig {
    ExperimentConfig::preset("synthetic_mul")
        .unwrap()
        .with_overrides(&["epochs=1", "dataset.synthetic.n=200", "network.hidden=[8]"])
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn basis_bytes_are_bit_exact(d in 2usize..48, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let m = 1 + ((d - 1) as f64 * frac) as usize;
        let b = make_basis(d, m, seed).unwrap();
        let back = BasisMatrix::from_bytes(&b.to_bytes()).unwrap();
        prop_assert_eq!(back.seed(), b.seed());
        let bits = |x: &BasisMatrix| x.rows().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&b));
    }

    #[test]
    fn idx_round_trips(rows in 1usize..6, cols in 1usize..6, fill in any::<u8>()) {
        let data: Vec<u8> = (0..rows * cols).map(|i| fill.wrapping_add(i as u8)).collect();
        let t = parse_idx(&encode_idx(0x0803, &[1, rows, cols], &data)).unwrap();
        prop_assert_eq!(t.dims, vec![1, rows, cols]);
        prop_assert_eq!(t.data, data);
    }
}

#[test]
fn basis_rejects_truncation_and_foreign_bytes() {
    let bytes = make_basis(16, 4, 3).unwrap().to_bytes();
    assert!(BasisMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(BasisMatrix::from_bytes(&bad).is_err());
}

#[test]
fn dataset_export_round_trips_through_a_file() {
    let (train, test) = gen_synthetic(250, 6, 3, 4.0, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for ds in [&train, &test] {
        let p = dir.path().join("ds.bin");
        ds.save(&p).unwrap();
        assert_eq!(&Dataset::load(&p).unwrap(), ds);
    }
    let bytes = train.to_bytes();
    assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn checkpoint_json_restores_the_network_exactly() {
    let out = run_training(&tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("checkpoint.json");
    out.checkpoint.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.network().unwrap().flat_params(), out.network.flat_params());
}

#[test]
fn checkpoint_with_other_version_or_edited_config_is_refused() {
    let out = run_training(&tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");

    let mut v2 = out.checkpoint.clone();
    v2.version += 1;
    v2.save(&p).unwrap();
    assert!(Checkpoint::load(&p).is_err());

    let mut edited = out.checkpoint.clone();
    edited.config.optim.lr *= 2.0;
    edited.save(&p).unwrap();
    assert!(Checkpoint::load(&p).is_err());
}

#[test]
fn config_toml_round_trips_with_the_same_hash() {
    for name in spankey::harness::config::PRESETS {
        let cfg = ExperimentConfig::preset(name).unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
