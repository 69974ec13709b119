use adbench::cohort::{apply_labeling, stratified_subject_kfold, subject_labels, Labeling, Selection};
use adbench::data::{make_samples, normalization_spec, prepare, PrepConfig, Prepared};
use adbench::models::{ModelConfig, ModelKind};
use adbench::synth::{generate_in_memory, CohortSpec};
use adbench::train::{cross_validate, model_checksum, train_fold, AugmentConfig, CohortData, CvSpec, TrainConfig};
use adbench::volume::NormMode;
use adbench::Error;

fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::new(ModelKind::PrunedResnet, 2, 16).with_image_size(16);
    m.width = 0.25;
    m
}

fn tiny_train() -> TrainConfig {
    TrainConfig { max_epochs: 3, patience: 2, seed: 5, ..TrainConfig::for_model(ModelKind::PrunedResnet) }
}

fn cohort_on(n: usize, seed: u64, grid: [usize; 3]) -> (Vec<adbench::cohort::LabeledScan>, Vec<Prepared>) {
    let spec = CohortSpec::adni_like(n).coarsened(8);
    let (records, volumes) = generate_in_memory(&spec, seed).unwrap();
    let scans = apply_labeling(&records, Labeling::Visit953).unwrap().scans;
    let prep = PrepConfig { grid, ..PrepConfig::default() };
    let prepared = scans.iter().map(|s| prepare(&volumes[&s.scan_id], &prep).unwrap()).collect();
    (scans, prepared)
}

fn cohort(n: usize, seed: u64) -> (Vec<adbench::cohort::LabeledScan>, Vec<Prepared>) {
    cohort_on(n, seed, [16, 16, 20])
}

#[test]
fn training_is_reproducible() {
    let (scans, prepared) = cohort(24, 1);
    let model = tiny_model();
    let spec = normalization_spec(NormMode::ZscorePerImage, None).unwrap();
    let samples = make_samples(&scans, &prepared, &spec, &model).unwrap();
    let (train, val) = samples.split_at(16);
    let a = train_fold(&model, 0, train, val, &tiny_train()).unwrap();
    let b = train_fold(&model, 0, train, val, &tiny_train()).unwrap();
    assert_eq!(a.result, b.result);
    assert_eq!(model_checksum(&a.model), model_checksum(&b.model));
    assert!(a.result.epochs_run <= 3 && a.result.best_epoch >= 1);
    let c = train_fold(&model, 0, train, val, &TrainConfig { seed: 6, ..tiny_train() }).unwrap();
    assert_ne!(model_checksum(&a.model), model_checksum(&c.model));
}

#[test]
fn nan_input_reports_epoch_and_step() {
    let (scans, prepared) = cohort(12, 2);
    let model = tiny_model();
    let spec = normalization_spec(NormMode::ZscorePerImage, None).unwrap();
    let mut samples = make_samples(&scans, &prepared, &spec, &model).unwrap();
    for s in samples.iter_mut() {
        s.stack.data[0] = f32::NAN;
    }
    let cfg = TrainConfig { augment: AugmentConfig::NONE, ..tiny_train() };
    let err = train_fold(&model, 0, &samples[..8], &samples[8..], &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, step: 0 }), "{err}");
}

#[test]
fn label_outside_model_is_rejected() {
    let (scans, prepared) = cohort(12, 3);
    let model = tiny_model();
    let spec = normalization_spec(NormMode::ZscorePerImage, None).unwrap();
    let mut samples = make_samples(&scans, &prepared, &spec, &model).unwrap();
    samples[0].label = 2;
    let err = train_fold(&model, 0, &samples[..8], &samples[8..], &tiny_train()).unwrap_err();
    assert!(matches!(err, Error::LabelSpace(_)), "{err}");
}

#[test]
fn cross_validation_covers_every_fold_with_external_rows() {
    let (scans, prepared) = cohort(30, 4);
    let ext_spec = CohortSpec::fleni_like(8).coarsened(8);
    let (records, volumes) = generate_in_memory(&ext_spec, 9).unwrap();
    let ext_scans = apply_labeling(&records, Labeling::Visit953).unwrap().scans;
    let prep = PrepConfig { grid: [16, 16, 20], ..PrepConfig::default() };
    let ext_prep: Vec<_> = ext_scans.iter().map(|s| prepare(&volumes[&s.scan_id], &prep).unwrap()).collect();
    let plan = stratified_subject_kfold(&subject_labels(&scans), 3, 0).unwrap();
    let model = tiny_model();
    let train = TrainConfig { max_epochs: 1, patience: 1, ..tiny_train() };
    let spec = CvSpec { model: &model, train: &train, selection: Selection::First, normalization: NormMode::ZscoreGlobal };
    let main = CohortData { name: "main".into(), scans: &scans, prepared: &prepared };
    let ext = [CohortData { name: "ext".into(), scans: &ext_scans, prepared: &ext_prep }];
    let mut seen = Vec::new();
    let out = cross_validate(&spec, &main, &plan, &ext, |f| {
        assert!(f.global_stats.as_ref().unwrap().provenance.contains("train"));
        seen.push(f.trained.result.fold);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(out.test.len(), 3);
    assert_eq!(out.external[0].1.len(), 3);
}

#[test]
fn occlusion_adaptor_matches_direct_prediction() {
    use adbench::models::Model;
    use adbench::occlusion::{occlusion_map, Classifier, ModelClassifier, OcclusionConfig};
    use adbench::train::predict_samples;
    let (scans, prepared) = cohort_on(6, 7, [16, 16, 16]);
    let spec = normalization_spec(NormMode::ZscorePerImage, None).unwrap();
    let mut full = ModelConfig::new(ModelKind::PlaneTransformer, 2, 77).with_image_size(16);
    full.width = 1.0 / 16.0;
    full.token_dim = 8;
    full.heads = 2;
    full.ff_dim = 16;
    for cfg in [tiny_model(), full] {
        let model = Model::build(&cfg, 3).unwrap();
        let samples = make_samples(&scans[..2], &prepared[..2], &spec, &cfg).unwrap();
        let clf = ModelClassifier::new(&model);
        let images: Vec<_> = samples.iter().map(|s| clf.image(&s.stack).unwrap()).collect();
        assert_eq!(clf.predict(&images).unwrap(), predict_samples(&model, &samples, 8).unwrap());
        let map = occlusion_map(&clf, &images[0], &OcclusionConfig { patch: 8, stride: 8, ..Default::default() }).unwrap();
        assert_eq!(map.pixels.len(), images[0].height * images[0].width);
    }
}
