use meepo_core::model::{meepo_forward, predict, ModelConfig};
use meepo_core::pointcloud::{generate_scene, read_cloud, write_cloud, SceneSpec};
use meepo_core::train::{evaluate, load_checkpoint, train_run, RunConfig};

const TINY: &str = "embedding_channels = 4
encoder_channels = 8,8,8,8
decoder_channels = 8,8,8,8
encoder_depths = 1,1,1,1
ssm.state_dim = 4
train.steps = 4
train.batch_size = 1
data.train_scenes = 2
data.val_scenes = 1
data.voxels = 120
";

#[test]
fn cloud_file_to_point_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("room.mpc");
    let spec = SceneSpec {
        num_points: 1500,
        ..SceneSpec::default()
    };
    let pc = generate_scene(3, &spec).unwrap();
    write_cloud(&pc, &path).unwrap();
    let back = read_cloud(&path).unwrap();
    assert_eq!(back.positions, pc.positions);
    assert_eq!(back.labels, pc.labels);

    let run = RunConfig::from_config_str(TINY).unwrap();
    let store = meepo_core::model::init_params::<f32>(&run.model, 1).unwrap();
    let (logits, inverse) = meepo_forward(&back, &run.model, &store, false).unwrap();
    assert_eq!(logits.cols(), run.model.num_classes);
    assert!(logits.all_finite());
    assert_eq!(inverse.len(), back.len());
    let voxel_pred = predict(&logits);
    let point_pred: Vec<i64> = inverse.iter().map(|&v| voxel_pred[v]).collect();
    assert_eq!(point_pred.len(), back.len());
    assert!(point_pred.iter().all(|&c| (0..run.model.num_classes as i64).contains(&c)));
}

#[test]
fn checkpoint_reproduces_validation_score() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("run.mpk");
    let run = RunConfig::from_config_str(TINY).unwrap();
    let out = train_run(&run, Some(&ck)).unwrap();
    assert_eq!(out.losses.len(), 4);
    assert!(out.losses.iter().all(|l| l.is_finite()));

    let loaded = load_checkpoint(&ck).unwrap();
    let again = RunConfig::from_config_str(&loaded.config).unwrap();
    assert_eq!(again.model, run.model);
    let data = meepo_core::train::build_dataset(&again.data, &again.model).unwrap();
    let report = evaluate(&data.val, &again.model, &loaded.params, 4).unwrap();
    assert_eq!(report.miou, out.val_report.unwrap().miou);
}

#[test]
fn desk_preset_is_a_narrower_full_preset() {
    let desk = ModelConfig::desk();
    let paper = ModelConfig::paper();
    assert_eq!(desk.block_types, paper.block_types);
    assert_eq!(desk.encoder_depths.len(), paper.encoder_depths.len());
    assert!(desk.encoder_channels.iter().zip(&paper.encoder_channels).all(|(d, p)| d <= p));
}
