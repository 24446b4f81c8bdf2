mod common;

use proptest::prelude::*;
use shvit::io::{self, Header};
use shvit::model::{Model, ModelConfig};
use shvit::nn::Module;
use shvit::rng::Rng;
use shvit::Error;

fn model() -> Model {
    let mut rng = Rng::new(7);
    let mut m = Model::build(&ModelConfig::tiny(), &mut rng).unwrap();
    common::jitter_affine(&mut m, &mut rng);
    m
}

/// Re-encodes `bytes` with an edited header and the original payload.
fn with_header(bytes: &[u8], edit: impl FnOnce(&mut Header)) -> Vec<u8> {
    let (mut h, payload) = io::read_header(bytes).unwrap();
    edit(&mut h);
    let json = serde_json::to_vec(&h).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

#[test]
fn save_load_save_is_bit_exact() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.shvw");
    io::save_model(&m, &p).unwrap();
    let loaded = io::load_model(&p).unwrap();
    for ((na, a, _), (nb, b, _)) in m.named_tensors().iter().zip(loaded.named_tensors().iter()) {
        assert_eq!(na, nb);
        let (a, b) = (a.to_vec_f32(), b.to_vec_f32());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
    }
    assert_eq!(std::fs::read(&p).unwrap(), io::model_bytes(&loaded).unwrap());
    let x = Rng::new(1).normal_tensor(&[2, 3, 32, 32], 1.0);
    let ya = m.forward(&x).unwrap().to_vec_f32();
    let yb = loaded.forward(&x).unwrap().to_vec_f32();
    assert!(ya.iter().zip(&yb).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn bad_magic() {
    let mut b = io::model_bytes(&model()).unwrap();
    b[..4].copy_from_slice(b"GGUF");
    assert!(matches!(io::model_from_bytes(&b), Err(Error::BadMagic(m)) if &m == b"GGUF"));
}

#[test]
fn version_mismatch() {
    let mut b = io::model_bytes(&model()).unwrap();
    b[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        io::model_from_bytes(&b),
        Err(Error::VersionMismatch { found: 7, expected: 1 })
    ));
}

#[test]
fn truncation_in_each_region() {
    let b = io::model_bytes(&model()).unwrap();
    let hlen = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    for (cut, region) in [(10, "file prefix"), (16 + hlen / 2, "header"), (b.len() - 3, "payload")] {
        match io::model_from_bytes(&b[..cut]) {
            Err(Error::Truncated { what, .. }) => assert_eq!(what, region),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn shape_mismatch_with_consistent_byte_count() {
    let b = io::model_bytes(&model()).unwrap();
    // Swap the two leading dims of a non-square weight: the byte count still
    // agrees, only the architecture check can catch it.
    let (h, _) = io::read_header(&b).unwrap();
    let victim = h
        .tensors
        .iter()
        .find(|e| e.shape.len() >= 2 && e.shape[0] != e.shape[1])
        .unwrap()
        .name
        .clone();
    let edited = with_header(&b, |h| {
        let e = h.tensors.iter_mut().find(|e| e.name == victim).unwrap();
        e.shape.swap(0, 1);
    });
    assert!(io::read_header(&edited).is_ok());
    match io::model_from_bytes(&edited) {
        Err(Error::ManifestMismatch { name, detail }) => {
            assert_eq!(name, victim);
            assert!(detail.contains("shape"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn shape_mismatch_with_wrong_byte_count() {
    let b = io::model_bytes(&model()).unwrap();
    let edited = with_header(&b, |h| h.tensors[0].shape[0] += 1);
    assert!(matches!(io::model_from_bytes(&edited), Err(Error::ManifestMismatch { .. })));
}

#[test]
fn missing_and_extra_entries() {
    let b = io::model_bytes(&model()).unwrap();
    let renamed = with_header(&b, |h| h.tensors[3].name = "stages.9.bogus".into());
    assert!(matches!(io::model_from_bytes(&renamed), Err(Error::ManifestMismatch { .. })));
    let other_arch = with_header(&b, |h| {
        h.config.as_mut().unwrap().num_classes = 5;
    });
    assert!(matches!(io::model_from_bytes(&other_arch), Err(Error::ManifestMismatch { .. })));
}

#[test]
fn trailing_bytes_and_garbage_header() {
    let mut b = io::model_bytes(&model()).unwrap();
    b.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(io::model_from_bytes(&b), Err(Error::Invalid(_))));

    let mut g = b"SHVW".to_vec();
    g.extend_from_slice(&1u32.to_le_bytes());
    g.extend_from_slice(&5u64.to_le_bytes());
    g.extend_from_slice(b"{oops");
    assert!(matches!(io::model_from_bytes(&g), Err(Error::Header(_))));
}

#[test]
fn missing_file_is_io() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(io::load_model(&dir.path().join("none")), Err(Error::Io(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_truncation_is_rejected(frac in 0.0f64..1.0) {
        let b = io::model_bytes(&Model::build(&ModelConfig::tiny(), &mut Rng::new(1)).unwrap()).unwrap();
        let cut = (frac * b.len() as f64) as usize;
        prop_assert!(io::model_from_bytes(&b[..cut]).is_err());
    }

    #[test]
    fn corrupted_prefix_or_header_never_panics(pos in 0usize..400, byte in any::<u8>()) {
        let mut b = io::model_bytes(&Model::build(&ModelConfig::tiny(), &mut Rng::new(1)).unwrap()).unwrap();
        let pos = pos % b.len();
        b[pos] = byte;
        let _ = io::model_from_bytes(&b);
    }

    #[test]
    fn tensor_files_round_trip(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let t = Rng::new(seed).normal_tensor(&dims, 1.0);
        let back = io::tensor_from_bytes(&io::tensor_bytes(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.to_vec_f32().iter().zip(t.to_vec_f32()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
