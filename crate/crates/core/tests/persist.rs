use std::collections::BTreeSet;
use std::fs;

use emovq::audio::{MelSpectrogram, NormStats, SpectrogramConfig};
use emovq::classifier::{ClassifierConfig, ClassifierModel, EMBED_DIM};
use emovq::generator::{GeneratorConfig, GeneratorModel, StyleFeatures};
use emovq::persist::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn jitter_params(store: &mut emovq::nn::ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = (*v + rng.gen_range(-0.05..0.05)) as f32 as f64;
        }
    }
}

fn classifier() -> ClassifierModel {
    let mut m = ClassifierModel::new(ClassifierConfig {
        channels: 16,
        ffn_dim: 16,
        ..ClassifierConfig::default()
    })
    .unwrap();
    jitter_params(m.params_mut(), 1);
    m.set_norm(NormStats {
        mean: -4.25,
        std: 2.5,
    });
    m.set_trained_epochs(3);
    m
}

fn generator() -> GeneratorModel {
    let mut m = GeneratorModel::new(GeneratorConfig {
        width: 16,
        style_dim: 4,
        ffn_dim: 16,
        ..GeneratorConfig::toy()
    })
    .unwrap();
    jitter_params(m.params_mut(), 2);
    m.set_norm(NormStats {
        mean: -3.0,
        std: 1.75,
    });
    m
}

fn mel(rng: &mut ChaCha8Rng, t: usize) -> MelSpectrogram {
    let v = (0..t * 80).map(|_| rng.gen_range(-9.0..0.0)).collect();
    MelSpectrogram::new(v, t, SpectrogramConfig::default()).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("c.aeck");
    let b = dir.path().join("c2.aeck");
    save_classifier(&classifier(), &a).unwrap();
    let loaded = load_classifier(&a).unwrap();
    save_classifier(&loaded, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let g = dir.path().join("g.aeck");
    let g2 = dir.path().join("g2.aeck");
    save_generator(&generator(), &g).unwrap();
    save_generator(&load_generator(&g).unwrap(), &g2).unwrap();
    assert_eq!(fs::read(&g).unwrap(), fs::read(&g2).unwrap());
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn loaded_models_compute_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cls = classifier();
    let gen = generator();
    let cp = dir.path().join("c.aeck");
    let gp = dir.path().join("g.aeck");
    save_classifier(&cls, &cp).unwrap();
    save_generator(&gen, &gp).unwrap();
    let cls2 = load_classifier(&cp).unwrap();
    let gen2 = load_generator(&gp).unwrap();
    assert_eq!(cls2.norm(), cls.norm());
    assert_eq!(cls2.trained_epochs(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in [9, 20, 31, 48, 64] {
        let x = mel(&mut rng, t);
        let za = cls.encode(&x).unwrap();
        let zb = cls2.encode(&x).unwrap();
        assert!(za.iter().zip(&zb).all(|(p, q)| p.to_bits() == q.to_bits()));
        let e: Vec<f64> = (0..EMBED_DIM).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let s = StyleFeatures([0.1, 0.2, 0.0, -0.3, 0.5]);
        let ya = gen.generate(&x, &s, &e).unwrap();
        let yb = gen2.generate(&x, &s, &e).unwrap();
        assert!(ya
            .data()
            .iter()
            .zip(yb.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn header_inventories_every_tensor_once() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.aeck");
    let m = classifier();
    save_classifier(&m, &p).unwrap();
    let h = read_header(&p).unwrap();
    assert_eq!(h.format_version, FORMAT_VERSION);
    assert_eq!(h.kind(), ModelKind::Classifier);
    assert_eq!(h.tensors.len(), m.params().len());
    let names: BTreeSet<&str> = h.tensors.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names.len(), h.tensors.len());
    for (e, name) in h.tensors.iter().zip(m.params().names()) {
        assert_eq!(&e.name, name);
    }
    let bytes = fs::read(&p).unwrap();
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 16 + hlen + h.payload_len());
}

#[test]
fn non_finite_parameters_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = classifier();
    m.params_mut().tensors_mut()[2].data_mut()[0] = f64::NAN;
    let p = dir.path().join("bad.aeck");
    let err = save_classifier(&m, &p).unwrap_err();
    assert!(matches!(err, CheckpointError::NonFinite(_)));
    assert!(!p.exists());
}

#[test]
fn truncated_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.aeck");
    save_classifier(&classifier(), &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
    let err = load_checkpoint(&p).unwrap_err();
    assert!(matches!(err, CheckpointError::Truncated { .. }));
    assert!(err
        .to_string()
        .contains("payload shorter than header declares"));
    fs::write(&p, &bytes[..40]).unwrap();
    assert!(load_checkpoint(&p).is_err());
    fs::write(&p, b"AECK").unwrap();
    assert!(load_checkpoint(&p).is_err());
}

#[test]
fn future_versions_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.aeck");
    save_classifier(&classifier(), &p).unwrap();
    let mut bytes = fs::read(&p).unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&p, &bytes).unwrap();
    let err = load_checkpoint(&p).unwrap_err();
    assert!(matches!(err, CheckpointError::Version { found: 2, .. }));
    assert!(err.to_string().contains("[1]"), "{err}");
}

#[test]
fn kinds_and_shapes_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.aeck");
    save_classifier(&classifier(), &p).unwrap();
    assert!(matches!(
        load_generator(&p),
        Err(CheckpointError::Kind {
            found: ModelKind::Classifier,
            ..
        })
    ));
    let mut ck = load_checkpoint(&p).unwrap();
    ck.header.tensors[0].shape = vec![1, 1];
    assert!(matches!(ck.to_bytes(), Err(CheckpointError::Mismatch(_))));
    let mut ck = load_checkpoint(&p).unwrap();
    ck.header.tensors[0].name = "renamed".into();
    assert!(ck.into_classifier().is_err());
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing.aeck")),
        Err(CheckpointError::Io { .. })
    ));
}
