use std::path::{Path, PathBuf};

use ccx::data::{generate_dataset, iterate, Dataset, GeneratorOptions, IterationMode, Split};
use ccx::model::ChangeCaptioner;
use ccx::optim::{AdamW, AdamWConfig};
use ccx::params::Group;
use ccx::train::{
    accumulate_batch_grads, build_vocabulary, evaluate_checkpoint, load_checkpoint, run_pipeline, save_checkpoint, train_step, Config, PipelinePlan, RunOptions,
    TrainData, TrainState,
};

fn overfit_fixture(dir: &Path, pairs: usize) -> PathBuf {
    let options = GeneratorOptions {
        pairs,
        seed: 7,
        paraphrases: false,
        all_train: true,
        ..GeneratorOptions::default()
    };
    generate_dataset(&options, dir).unwrap().manifest
}

fn short_config(manifest: &Path) -> Config {
    let mut c = Config::profile("overfit").unwrap();
    c.data.manifest = manifest.to_path_buf();
    for s in [&mut c.stage1, &mut c.stage2, &mut c.stage3] {
        s.epochs = 1;
        s.max_steps = Some(2);
    }
    c
}

fn setup(config: &Config) -> (ChangeCaptioner, TrainData) {
    let records = ccx::data::load_manifest(&config.data.manifest).unwrap();
    let model = ChangeCaptioner::new(config.model(), build_vocabulary(&records).unwrap(), config.seed).unwrap();
    let data = TrainData::new(Dataset::load(&config.data.manifest, Some(Split::Train)).unwrap(), &model.vocab).unwrap();
    (model, data)
}

#[test]
fn fixed_batch_loss_descends_in_stage_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(&overfit_fixture(dir.path(), 32));
    let (mut model, data) = setup(&config);
    let cfg = config.stage(3).unwrap();
    assert_eq!(cfg.base_lr, 1e-3);
    let items = iterate(data.records(), IterationMode::RandomChoice, 1, 0).unwrap();
    let batch = &items[..cfg.batch_size];
    let mut opt = AdamW::new(AdamWConfig::default(), &model.store);
    let options = RunOptions::default();
    let mut losses = Vec::new();
    for _ in 0..20 {
        losses.push(train_step(&mut model, &mut opt, &cfg, &data, batch, &options).unwrap().loss);
    }
    losses.push(accumulate_batch_grads(&mut model, &cfg, &data, batch, &options).unwrap());
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn checkpoint_round_trip_then_step_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(&overfit_fixture(&dir.path().join("data"), 6));
    let (mut model, data) = setup(&config);
    let cfg = config.stage(2).unwrap();
    let items = iterate(data.records(), cfg.mode, 5, 0).unwrap();
    let options = RunOptions::default();
    let mut opt = AdamW::new(AdamWConfig::default(), &model.store);
    train_step(&mut model, &mut opt, &cfg, &data, &items[..4], &options).unwrap();

    let state = TrainState {
        stage: 1,
        epoch: 0,
        step: 1,
        rng_seed: config.seed,
        rng_counter: 0,
        adam_steps: opt.steps.clone(),
        fingerprint: config.fingerprint(),
    };
    let ck_dir = dir.path().join("ck");
    save_checkpoint(&ck_dir, &config, &model, &opt, &state).unwrap();
    let ck = load_checkpoint(&ck_dir).unwrap();
    assert_eq!(ck.state, state);
    assert_eq!(ck.optimizer, opt);
    assert_eq!(ck.model.store.checksum(None), model.store.checksum(None));

    let (mut a, mut opt_a) = (model, opt);
    let (mut b, mut opt_b) = (ck.model, ck.optimizer);
    train_step(&mut a, &mut opt_a, &cfg, &data, &items[4..6], &options).unwrap();
    train_step(&mut b, &mut opt_b, &cfg, &data, &items[4..6], &options).unwrap();
    assert_eq!(a.store.checksum(None), b.store.checksum(None));
    assert_eq!(opt_a, opt_b);
}

#[test]
fn skipping_stage_one_changes_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(&overfit_fixture(&dir.path().join("data"), 6));
    let full = run_pipeline(&config, &PipelinePlan::all(dir.path().join("full")), &RunOptions::default(), &mut |_| {}).unwrap();
    let mut skip = config.clone();
    skip.train.skip_stage1 = true;
    let short = run_pipeline(&skip, &PipelinePlan::all(dir.path().join("skip")), &RunOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(short.reports.len(), 2);
    assert_ne!(full.model.store.checksum(None), short.model.store.checksum(None));
    assert_ne!(full.model.store.checksum(Some(Group::Enhancer)), short.model.store.checksum(Some(Group::Enhancer)));
}

#[test]
fn evaluating_a_checkpoint_twice_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = overfit_fixture(&dir.path().join("data"), 6);
    let config = short_config(&manifest);
    let out = run_pipeline(&config, &PipelinePlan::all(dir.path().join("run")), &RunOptions::default(), &mut |_| {}).unwrap();
    let ck = out.final_checkpoint().unwrap();
    let a = evaluate_checkpoint(ck, &manifest, Split::Train).unwrap();
    let b = evaluate_checkpoint(ck, &manifest, Split::Train).unwrap();
    assert!(a.report.is_finite());
    assert_eq!(a.report, b.report);
    assert_eq!(a.captions, b.captions);
}
