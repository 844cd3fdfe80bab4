use proptest::prelude::*;
use zslab::checkpoint::{Checkpoint, GuardState};
use zslab::config::resolve_value;
use zslab::format::{
    decode_class_table, decode_dataset, decode_embeddings, encode_class_table, encode_dataset, encode_embeddings,
    export_embeddings,
};
use zslab_core::data::{generate_dataset, DatasetSpec};
use zslab_core::encoder::Encoder;
use zslab_core::losses::ClassEmbeddingTable;
use zslab_core::optim::Adam;

fn tiny_config() -> zslab::config::RunConfig {
    resolve_value(
        serde_json::json!({
            "dataset": {"num_categories": 3, "instances_per_category": 3, "sketches_per_instance": 1, "image_size": 12},
            "split": {"unseen_count": 1},
            "encoder": {"image_size": 12, "patch_size": 4, "embed_dim": 8, "depth": 1, "mlp_dim": 8, "feature_dim": 4},
            "train": {"categories_per_batch": 2, "probe_instances": 1}
        }),
        None,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_round_trip_is_byte_stable(cats in 1usize..4, inst in 1usize..4, sk in 1usize..3, size in 12usize..17, seed in 0u64..1000) {
        let spec = DatasetSpec { num_categories: cats, instances_per_category: inst, sketches_per_instance: sk, image_size: size, seed };
        let d = generate_dataset(&spec).unwrap();
        let bytes = encode_dataset(&d);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(encode_dataset(&back), bytes);
    }
}

#[test]
fn every_truncation_is_a_format_error() {
    let d = generate_dataset(&DatasetSpec { num_categories: 2, instances_per_category: 2, sketches_per_instance: 1, image_size: 12, seed: 1 }).unwrap();
    let bytes = encode_dataset(&d);
    for cut in 0..bytes.len() {
        let err = decode_dataset(&bytes[..cut]).unwrap_err();
        assert!(err.offset <= cut, "offset {} beyond cut {}", err.offset, cut);
    }
}

#[test]
fn checksum_detects_any_payload_flip() {
    let d = generate_dataset(&DatasetSpec { num_categories: 2, instances_per_category: 2, sketches_per_instance: 1, image_size: 12, seed: 1 }).unwrap();
    let bytes = encode_dataset(&d);
    let payload_start = bytes.len() - d.items().len() * (13 + 8 * 144);
    for pos in (payload_start..bytes.len()).step_by(97) {
        let mut bad = bytes.clone();
        bad[pos] ^= 1;
        assert!(decode_dataset(&bad).is_err(), "flip at {}", pos);
    }
}

#[test]
fn embeddings_round_trip_with_unit_rows() {
    let config = tiny_config();
    let d = generate_dataset(&config.dataset).unwrap();
    let enc = Encoder::build(config.encoder.clone(), 4).unwrap();
    let file = export_embeddings(&enc, &d).unwrap();
    assert_eq!(file.rows.len(), d.items().len());
    assert!(file.rows.iter().all(|r| (r.vector.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6));
    let bytes = encode_embeddings(&file);
    assert_eq!(decode_embeddings(&bytes).unwrap(), file);
    assert!(decode_embeddings(&bytes[..bytes.len() - 1]).is_err());
    let mut wrong = bytes.clone();
    wrong[..5].copy_from_slice(b"ZSDS1");
    assert_eq!(decode_embeddings(&wrong).unwrap_err().offset, 0);
}

#[test]
fn class_table_uses_the_blob_container() {
    let table = ClassEmbeddingTable::pseudo(&[0, 3, 5], 6, 0.07).unwrap();
    let bytes = encode_class_table(&table);
    assert_eq!(&bytes[..6], b"ZSLAB1");
    assert_eq!(decode_class_table(&bytes, 0.07).unwrap(), table);
}

#[test]
fn checkpoint_rejects_damage() {
    let config = tiny_config();
    let encoder = Encoder::build(config.encoder.clone(), config.train.model_seed).unwrap();
    let optimizer = Adam::new(encoder.store(), config.train.lr);
    let ck = Checkpoint { config, epoch: 0, step: 0, guard: GuardState::default(), encoder, optimizer };
    let bytes = ck.to_bytes();
    for cut in [0, 5, 6, 20, bytes.len() / 3, bytes.len() - 8] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 8]);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}
