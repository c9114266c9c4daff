use std::fs;
use std::path::PathBuf;

use fsdm_core::harness::config::Mode;
use fsdm_core::harness::io::{decode_pgm, decode_points_csv, encode_pgm, encode_points_csv, write_samples};
use fsdm_core::harness::{gen_toy_domains, pretrain, Checkpoint, RunConfig};
use fsdm_core::numerics::{PointSet, Tensor};
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut seeds: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    seeds.sort();
    assert!(!seeds.is_empty(), "no seeds under {}", dir.display());
    seeds
}

// Seeds are valid inputs, so each must decode and survive a round trip.
#[test]
fn corpus_seeds_round_trip() {
    for (p, bytes) in corpus("checkpoint") {
        let ck = Checkpoint::from_bytes(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(ck.to_bytes(), bytes, "{}", p.display());
    }
    for (p, bytes) in corpus("pgm") {
        let img = decode_pgm(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(decode_pgm(&encode_pgm(&img).unwrap()).unwrap(), img);
    }
    for (p, bytes) in corpus("points_csv") {
        let pts =
            decode_points_csv(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(decode_points_csv(&encode_points_csv(&pts).unwrap()).unwrap(), pts);
    }
    for (p, bytes) in corpus("config_json") {
        let cfg = RunConfig::from_json(std::str::from_utf8(&bytes).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::new(9, Mode::Image);
    cfg.dataset.n_source = 6;
    cfg.dataset.m_target = 2;
    cfg.schedule.steps = 20;
    cfg.phasic.t_s = 6.0;
    cfg.denoiser.widths = vec![2, 3];
    cfg.denoiser.time_dim = 4;
    cfg.train.batch_size = 2;
    cfg.train.pretrain_iters = 2;
    cfg.train.warmup_iters = 1;
    cfg.sample.sampler.m = 8;
    cfg.sample.sampler.t_stop = 3;
    cfg
}

#[test]
fn trained_checkpoint_survives_disk() {
    let cfg = tiny();
    let (src, _) = gen_toy_domains(&cfg.dataset, cfg.seed).unwrap();
    let ck = pretrain(&cfg, &src).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    let bytes = ck.to_bytes();
    for cut in [0, 3, 8, 15, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "prefix {cut} accepted");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn written_samples_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = Tensor::new(vec![2, 1, 2, 2], vec![-1.0, 0.0, 0.5, 1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
    let paths = write_samples(dir.path(), &imgs).unwrap();
    assert_eq!(paths.len(), 2);
    let back = decode_pgm(&fs::read(&paths[1]).unwrap()).unwrap();
    assert_eq!(back.data(), imgs.item(1).unwrap().data());

    let pts = Tensor::new(vec![2, 2], vec![0.25, -1.5, 3.0, 0.0]).unwrap();
    let paths = write_samples(&dir.path().join("pts"), &pts).unwrap();
    let text = fs::read_to_string(&paths[0]).unwrap();
    assert_eq!(decode_points_csv(&text).unwrap(), PointSet::from_rows(&pts).unwrap());
}

proptest! {
    #[test]
    fn pgm_decoding_is_stable(bytes in proptest::collection::vec(any::<u8>(), 1..64), w in 1usize..6) {
        let h = bytes.len().div_ceil(w);
        let mut data = bytes.clone();
        data.resize(w * h, 0);
        let mut file = format!("P5\n{w} {h}\n255\n").into_bytes();
        file.extend_from_slice(&data);
        let img = decode_pgm(&file).unwrap();
        prop_assert_eq!(img.shape(), &[1, h, w]);
        prop_assert_eq!(encode_pgm(&img).unwrap(), file);
    }

    #[test]
    fn points_csv_is_lossless(rows in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..20)) {
        let pts = PointSet::new(rows.iter().map(|&(x, y)| vec![x, y]).collect()).unwrap();
        prop_assert_eq!(decode_points_csv(&encode_points_csv(&pts).unwrap()).unwrap(), pts);
    }
}
