use std::path::Path;

use cvaegan::data::write_synthetic_dataset;
use cvaegan::harness::{generate_cmd, load_stage1, train_stage1, train_stage2, Checkpoint, TrainConfig};
use cvaegan::Error;

fn configs(root: &Path) -> (TrainConfig, TrainConfig) {
    let data = root.join("data");
    write_synthetic_dataset(&data, 240, 16, 3).unwrap();
    let s1 = TrainConfig {
        epochs: 1,
        data_dir: data.clone(),
        out_dir: root.join("run"),
        ..TrainConfig::desk(1)
    };
    let s2 = TrainConfig {
        epochs: 1,
        grid_every: 1,
        data_dir: data,
        out_dir: root.join("run"),
        ..TrainConfig::desk(2)
    };
    (s1, s2)
}

#[test]
fn end_to_end_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (s1, s2) = configs(dir.path());
    let a = train_stage1(&s1).unwrap();
    let b = train_stage2(&s2, Some(&a.checkpoint)).unwrap();

    assert_eq!(b.grids.len(), 1);
    assert_eq!(image::image_dimensions(&b.grids[0]).unwrap(), (8 * 64, 8 * 64));

    let emb = s1.data_dir.join("embeddings.emb");
    let out = dir.path().join("samples");
    let paths = generate_cmd(&a.checkpoint, &b.checkpoint, &emb, 4, 5, &out).unwrap();
    assert_eq!(paths.len(), 5);
    for p in &paths[..4] {
        assert_eq!(image::image_dimensions(p).unwrap(), (64, 64));
    }
    assert_eq!(paths[4].file_name().unwrap(), "grid.png");

    for ckpt in [&a.checkpoint, &b.checkpoint] {
        let bytes = std::fs::read(ckpt).unwrap();
        let copy = dir.path().join("copy.ckpt");
        Checkpoint::load(ckpt).unwrap().save(&copy).unwrap();
        assert_eq!(std::fs::read(&copy).unwrap(), bytes);
    }

    let wrong = TrainConfig {
        image_size: 32,
        ..s2.clone()
    };
    assert!(matches!(load_stage1(&a.checkpoint, &wrong), Err(Error::Config(_))));
    let missing = dir.path().join("nope.ckpt");
    assert!(matches!(train_stage2(&s2, Some(&missing)), Err(Error::Config(_))));
}
