use super::*;
use crate::data::make_gaussian_mixture;
use crate::nets::{param_digest, EncoderSpec};
use crate::objectives::KlMode;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        encoder: Some(EncoderSpec::Mlp { hidden: 16 }),
        latent_dim: Some(8),
        head_dim: Some(2),
        decoder_hidden: Some(8),
        disc_hidden: Some(8),
        dropout: None,
    }
}

fn tiny_cfg(mode: Mode, heads: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        heads,
        epochs,
        batch_size: 32,
        mode,
        seed: 7,
        main_optimizer: SgdConfig { lr: 0.01, momentum: 0.9 },
        arch: tiny_arch(),
        ..TrainConfig::default()
    }
}

fn gmm(n: usize, seed: u64) -> LabeledDataset {
    make_gaussian_mixture(4, n, 2, 6.0, seed).unwrap()
}

fn csv(rows: &[MetricsRow]) -> String {
    let mut out = Vec::new();
    write_metrics(&mut out, "d", rows).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn zero_epochs_rejected() {
    let ds = gmm(10, 1);
    assert!(train(&tiny_cfg(Mode::Dibs, 2, 0), &ds, None).is_err());
}

#[test]
fn class_count_mismatch_rejected() {
    let ds = gmm(10, 1);
    let mut tr = Trainer::new(tiny_cfg(Mode::Dibs, 2, 1), ds.shape(), 3).unwrap();
    assert!(tr.run_epoch(&ds, None).is_err());
}

#[test]
fn metrics_layout() {
    let ds = gmm(20, 1);
    let out = train(&tiny_cfg(Mode::Dibs, 3, 2), &ds, Some(&ds)).unwrap();
    assert_eq!(out.history.len(), 2 * 80usize.div_ceil(32));
    assert_eq!(out.trainer.epoch(), 2);
    let text = csv(&out.history);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# config_digest=d"));
    assert_eq!(
        lines.next(),
        Some("epoch,step,lr,nll_0,nll_1,nll_2,kl_0,kl_1,kl_2,l_g,l_d,abe,total,train_acc,val_acc")
    );
    let last = out.history.last().unwrap();
    assert!(last.train_acc.is_some() && last.val_acc.is_some() && last.l_g.is_some() && last.l_d.is_some());
    assert!(out.history[0].train_acc.is_none());
}

#[test]
fn same_seed_same_history() {
    let ds = gmm(20, 2);
    for mode in [Mode::Dibs, Mode::RandomEnsemble, Mode::Abe] {
        let cfg = tiny_cfg(mode, 2, 2);
        let a = train(&cfg, &ds, None).unwrap();
        let b = train(&cfg, &ds, None).unwrap();
        assert_eq!(csv(&a.history), csv(&b.history), "{mode:?}");
        assert_eq!(param_digest(&a.trainer.model, groups::all), param_digest(&b.trainer.model, groups::all));
    }
    let mc = tiny_cfg(Mode::McDropout, 1, 2);
    assert_eq!(csv(&train(&mc, &ds, None).unwrap().history), csv(&train(&mc, &ds, None).unwrap().history));
}

#[test]
fn lr_follows_schedule() {
    let ds = gmm(8, 3);
    let mut cfg = tiny_cfg(Mode::Abe, 2, 5);
    cfg.lr_decay = LrDecay { factor: 10.0, every: 2 };
    let out = train(&cfg, &ds, None).unwrap();
    for r in &out.history {
        assert_eq!(r.lr, 0.01 / 10f64.powi((r.epoch / 2) as i32));
    }
}

#[test]
fn phases_touch_only_their_parameters() {
    let ds = gmm(20, 4);
    let mut tr = Trainer::new(tiny_cfg(Mode::Dibs, 3, 1), ds.shape(), 4).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    let (x, y) = (ds.batch::<f32>(&idx), ds.batch_labels(&idx));
    let digests = |tr: &Trainer| {
        (
            param_digest(&tr.model, groups::encoder),
            param_digest(&tr.model, groups::head),
            param_digest(&tr.model, groups::decoder),
            param_digest(tr.discriminator().unwrap(), groups::all),
        )
    };
    let d0 = digests(&tr);
    tr.main_phase(&x, &y).unwrap();
    let d1 = digests(&tr);
    assert!(d1.0 != d0.0 && d1.1 != d0.1 && d1.2 != d0.2);
    assert_eq!(d1.3, d0.3);
    let out = tr.generator_phase(&x).unwrap();
    let d2 = digests(&tr);
    assert!(d2.0 != d1.0 && d2.1 != d1.1);
    assert_eq!((&d2.2, &d2.3), (&d1.2, &d1.3));
    tr.discriminator_phase(&out.pairs).unwrap();
    let d3 = digests(&tr);
    assert_eq!((&d3.0, &d3.1, &d3.2), (&d2.0, &d2.1, &d2.2));
    assert_ne!(d3.3, d2.3);
}

#[test]
fn baselines_have_no_adversary() {
    let ds = gmm(8, 5);
    for (mode, k) in [(Mode::RandomEnsemble, 3), (Mode::Abe, 2), (Mode::McDropout, 1)] {
        let mut tr = Trainer::new(tiny_cfg(mode, k, 1), ds.shape(), 4).unwrap();
        assert!(tr.discriminator().is_none());
        let rows = tr.run_epoch(&ds, None).unwrap();
        assert!(rows.iter().all(|r| r.l_g.is_none() && r.l_d.is_none()));
        assert_eq!(rows[0].abe.is_some(), mode == Mode::Abe);
        assert_eq!(tr.model.num_heads(), k);
    }
}

#[test]
fn random_ensemble_members_are_independent() {
    let ds = gmm(8, 6);
    let tr = Trainer::new(tiny_cfg(Mode::RandomEnsemble, 3, 1), ds.shape(), 4).unwrap();
    assert_eq!(tr.model.encoders.len(), 3);
    let single =
        Trainer::new(TrainConfig { heads: 1, seed: 8, ..tiny_cfg(Mode::RandomEnsemble, 1, 1) }, ds.shape(), 4).unwrap();
    // member 1 of seed 7 is the single member of seed 8
    assert_eq!(tr.model.encoders[1], single.model.encoders[0]);
    assert_eq!(tr.model.heads[1], single.model.heads[0]);
}

#[test]
fn divergence_is_reported() {
    let ds = gmm(8, 9);
    let mut cfg = tiny_cfg(Mode::Abe, 2, 3);
    cfg.main_optimizer.lr = 1e30;
    match train(&cfg, &ds, None) {
        Err(DibsError::NonFinite { .. }) => {}
        other => panic!("expected non-finite error, got {:?}", other.map(|o| o.history.len())),
    }
}

#[test]
fn explicit_kl_mode_trains() {
    let ds = gmm(20, 10);
    let mut cfg = tiny_cfg(Mode::Dibs, 2, 2);
    cfg.kl_mode = KlMode::Explicit;
    cfg.beta = 0.1;
    let out = train(&cfg, &ds, None).unwrap();
    assert!(out.history.iter().all(|r| r.total.is_finite()));
}

#[test]
fn finetune_freezes_encoder() {
    let ds = gmm(20, 11);
    let mut out = train(&tiny_cfg(Mode::Dibs, 2, 1), &ds, None).unwrap();
    let model = &mut out.trainer.model;
    let before = (param_digest(model, groups::encoder), param_digest(model, groups::all));
    assert!(transfer_finetune(model, &ds, 0, &out.trainer.config).unwrap().is_empty());
    assert_eq!(param_digest(model, groups::all), before.1);
    let target = make_gaussian_mixture(4, 20, 2, 6.0, 99).unwrap();
    let rows = transfer_finetune(model, &target, 2, &out.trainer.config).unwrap();
    assert!(!rows.is_empty());
    assert_eq!(param_digest(model, groups::encoder), before.0);
    assert_ne!(param_digest(model, groups::all), before.1);
}

#[test]
fn finetune_resets_decoders_for_new_classes() {
    let ds = gmm(20, 12);
    let mut out = train(&tiny_cfg(Mode::Abe, 2, 1), &ds, None).unwrap();
    let enc = param_digest(&out.trainer.model, groups::encoder);
    let target = make_gaussian_mixture(3, 20, 2, 6.0, 5).unwrap();
    transfer_finetune(&mut out.trainer.model, &target, 1, &out.trainer.config).unwrap();
    assert_eq!(out.trainer.model.config.num_classes, 3);
    assert_eq!(param_digest(&out.trainer.model, groups::encoder), enc);
    let wrong = make_gaussian_mixture(3, 5, 3, 6.0, 5).unwrap();
    assert!(transfer_finetune(&mut out.trainer.model, &wrong, 1, &out.trainer.config).is_err());
}

mod persistence {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gmm(20, 13);
        for (mode, k) in [(Mode::Dibs, 3), (Mode::RandomEnsemble, 2), (Mode::McDropout, 1)] {
            let out = train(&tiny_cfg(mode, k, 1), &ds, None).unwrap();
            let path = dir.path().join(format!("{mode:?}.tar"));
            save_checkpoint(&out.trainer, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            let x = ds.batch::<f32>(&(0..16).collect::<Vec<_>>());
            let (a, b) = (out.trainer.model.latents(&x).unwrap(), back.model.latents(&x).unwrap());
            for (la, lb) in a.iter().zip(&b) {
                let bits = |t: &crate::tensor::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&la.mean), bits(&lb.mean));
                assert_eq!(bits(&la.std), bits(&lb.std));
            }
            for i in 0..k {
                assert_eq!(out.trainer.model.decode(i, &a[i].mean).unwrap(), back.model.decode(i, &b[i].mean).unwrap());
            }
            assert_eq!(back.model, out.trainer.model);
            assert_eq!(back.epoch(), 1);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gmm(20, 14);
        for (mode, k) in [(Mode::Dibs, 2), (Mode::McDropout, 1)] {
            let cfg = tiny_cfg(mode, k, 4);
            let full = train(&cfg, &ds, Some(&ds)).unwrap();
            let mut first = Trainer::new(cfg.clone(), ds.shape(), 4).unwrap();
            let mut rows = first.run_epoch(&ds, Some(&ds)).unwrap();
            rows.extend(first.run_epoch(&ds, Some(&ds)).unwrap());
            let path = dir.path().join("mid.tar");
            save_checkpoint(&first, &path).unwrap();
            drop(first);
            let mut resumed = load_checkpoint(&path).unwrap();
            rows.extend(resumed.run(&ds, Some(&ds)).unwrap());
            assert_eq!(csv(&rows), csv(&full.history), "{mode:?}");
            assert_eq!(resumed.model, full.trainer.model);
        }
    }

    fn rewrite(path: &std::path::Path, edit: impl Fn(&mut serde_json::Value)) -> std::path::PathBuf {
        let mut archive = tar::Archive::new(std::fs::File::open(path).unwrap());
        let mut files = Vec::new();
        for e in archive.entries().unwrap() {
            let mut e = e.unwrap();
            let name = e.path().unwrap().to_string_lossy().into_owned();
            let mut bytes = Vec::new();
            std::io::Read::read_to_end(&mut e, &mut bytes).unwrap();
            files.push((name, bytes));
        }
        let out = path.with_extension("edited.tar");
        let mut b = tar::Builder::new(std::fs::File::create(&out).unwrap());
        for (name, mut bytes) in files {
            if name == MANIFEST_NAME {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                edit(&mut v);
                bytes = serde_json::to_vec(&v).unwrap();
            }
            let mut h = tar::Header::new_gnu();
            h.set_size(bytes.len() as u64);
            h.set_cksum();
            b.append_data(&mut h, &name, bytes.as_slice()).unwrap();
        }
        b.into_inner().unwrap();
        out
    }

    #[test]
    fn edited_or_corrupt_archives_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gmm(10, 15);
        let out = train(&tiny_cfg(Mode::Dibs, 2, 1), &ds, None).unwrap();
        let path = dir.path().join("ck.tar");
        save_checkpoint(&out.trainer, &path).unwrap();

        let shape = rewrite(&path, |v| v["arrays"][0]["shape"][1] = serde_json::json!(99));
        let err = load_checkpoint(&shape).err().expect("shape edit must fail");
        assert!(matches!(err, DibsError::Checkpoint(_)), "{err}");

        let renamed = rewrite(&path, |v| v["arrays"][2]["name"] = serde_json::json!("model.bogus"));
        assert!(load_checkpoint(&renamed).is_err());

        let config = rewrite(&path, |v| v["config"]["seed"] = serde_json::json!(1234));
        assert!(load_checkpoint(&config).is_err());

        let garbage = dir.path().join("garbage.tar");
        std::fs::write(&garbage, b"not an archive at all").unwrap();
        assert!(load_checkpoint(&garbage).is_err());
        assert!(load_checkpoint(dir.path().join("missing.tar")).is_err());

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("trunc.tar");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&truncated).is_err());
    }
}
