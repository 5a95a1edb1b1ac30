//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.
//!
//! `cargo test --test acceptance` runs all of them; trailing arguments
//! select criteria by number (`cargo test --test acceptance -- 4 6`).
//! Failures are reported but only change the exit status when
//! `DIBS_ACCEPTANCE_STRICT=1` is set.

use std::path::PathBuf;
use std::time::Instant;

use dibs::data::{
    apply_shift, load_idx, make_gaussian_mixture, mixture_centers, rotate_points, split, uniform_in_box, FeatureShape,
    LabeledDataset, ShiftSpec,
};
use dibs::nets::{
    assign_params, flatten_params, groups, param_digest, Discriminator, EncoderSpec, EnsembleModel, ForwardCtx,
    ModelConfig, ParamGrad, ParamSet,
};
use dibs::objectives::{
    build_pairs, build_pairs_from_latents, discriminator_loss, discriminator_loss_grad, generator_backward,
    generator_loss, kl_gaussian_to_standard, vib_loss, vib_loss_grad, KlMode, LossWeights, PairOptions,
};
use dibs::oodeval::{aupr, auroc, detect_ensemble, detect_member, evaluate, Aggregation, DetectorConfig, OodScoreSet};
use dibs::rng::{standard_normal, stream, Stream};
use dibs::tensor::Tensor;
use dibs::training::{
    load_checkpoint, save_checkpoint, train, transfer_finetune, write_metrics, AdamConfig, ArchConfig, MetricsRow,
    Mode, SgdConfig, TrainConfig, Trainer,
};
use dibs::uncertainty::{
    accuracy, aleatoric_variance, mean_kl, mean_pairwise_w2, member_scores, modal_prediction, mode,
    posterior_predictive, PredictionSet,
};
use dibs_oracle::{brute_aupr, brute_auroc, brute_majority, fd_gradient, mc_kl, DiagGaussian};
use rand::Rng;

type Check = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion = (usize, &'static str, fn() -> Check);

const SEEDS: [u64; 3] = [1, 2, 3];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "kl closed form vs monte carlo", c1_kl_oracle),
        (2, "analytic vs finite-difference gradients", c2_gradients),
        (3, "ranking metrics and vote aggregation vs brute force", c3_metrics),
        (4, "desk ood auroc on the gaussian mixture", c4_desk_ood),
        (5, "mnist desk run", c5_mnist),
        (6, "head diversity vs adversary-free ablation", c6_diversity),
        (7, "kl non-increasing in beta", c7_beta),
        (8, "exact-value unit points", c8_exact),
        (9, "determinism and persistence", c9_determinism),
        (10, "transfer contract", c10_transfer),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {n:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} failing");
    if failed > 0 && std::env::var("DIBS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn check(ok: bool, what: &str, failures: &mut Vec<String>) {
    if !ok {
        failures.push(what.to_string());
    }
}

fn verdict(failures: Vec<String>, summary: String) -> Check {
    if failures.is_empty() {
        Ok((true, summary))
    } else {
        Ok((false, format!("{summary}; failed: {}", failures.join(", "))))
    }
}

fn c1_kl_oracle() -> Check {
    let t0 = Instant::now();
    let mut rng = stream(101, Stream::Eval);
    let mut worst = 0.0f64;
    let mut worst_z = 0.0f64;
    for t in 0..20 {
        // Per-sample variance is sum_d (s^2 - 1)^2 / 2 + m^2 s^2, so wide
        // std ranges make 1e5 draws too noisy for a 0.02 bound.
        let mean: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let std: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..1.5)).collect();
        let lat = dibs::nets::GaussianLatent::new(
            Tensor::from_vec(&[1, 8], mean.clone())?,
            Tensor::from_vec(&[1, 8], std.clone())?,
        )?;
        let closed = kl_gaussian_to_standard(&lat)?[0];
        let (mc, se) = mc_kl(&DiagGaussian::new(mean, std), 100_000, 1000 + t);
        worst = worst.max((closed - mc).abs());
        worst_z = worst_z.max((closed - mc).abs() / se);
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst < 0.02 && secs < 10.0,
        format!("max |closed - mc| = {worst:.4} (< 0.02), max z {worst_z:.2}, {secs:.2}s (< 10s)"),
    ))
}

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| {
            let scale = a.abs().max(f.abs());
            if scale < 1e-7 {
                0.0
            } else {
                (a - f).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn tiny_model(k: usize) -> dibs::Result<EnsembleModel<f64>> {
    let mut cfg = ModelConfig::for_input(FeatureShape::Vector { dim: 3 }, 3, k);
    cfg.encoder = EncoderSpec::Mlp { hidden: 6 };
    cfg.latent_dim = 4;
    cfg.head_dim = 2;
    cfg.decoder_hidden = 5;
    EnsembleModel::new(cfg, &mut stream(11, Stream::Init))
}

/// Small random biases keep rectifier inputs away from the kink.
fn tiny_disc() -> Discriminator<f64> {
    let mut d = Discriminator::new(2, 6, &mut stream(12, Stream::Init));
    let mut rng = stream(12, Stream::Eval);
    d.visit_params_mut("", &mut |name, t| {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    });
    d
}

fn c2_gradients() -> Check {
    let t0 = Instant::now();
    let m = tiny_model(3)?;
    let d = tiny_disc();
    let n_params = m.param_count() + flatten_params(&d, groups::all).len();
    let x = standard_normal::<f64>(&mut stream(13, Stream::Eval), &[5, 3]);
    let y: Vec<usize> = (0..5).map(|i| i % 3).collect();
    let mut eps_rng = stream(5, Stream::Eps);
    let eps: Vec<Tensor<f64>> = (0..3).map(|_| standard_normal(&mut eps_rng, &[5, 2])).collect();
    let w = LossWeights { alpha: vec![0.9, 0.6, 0.8], beta: vec![0.2, 0.5, 0.1], adv_weight: 1.0 };

    let mut errs = Vec::new();
    for mode in [KlMode::Explicit, KlMode::Adversarial] {
        let (_, grads) = vib_loss_grad(&m, &x, &y, &w, &eps, mode, false, &mut ForwardCtx::eval())?;
        let mut probe = m.clone();
        let fd = fd_gradient(
            |p| {
                assign_params(&mut probe, groups::all, p);
                vib_loss(&probe, &x, &y, &w, &eps, mode).map(|b| b.total).unwrap_or(f64::NAN)
            },
            &flatten_params(&m, groups::all),
            1e-5,
        )
        .ok_or("vib loss not finite under perturbation")?;
        errs.push((format!("vib[{mode:?}]"), rel_err(&grads.flatten(), &fd)));
    }

    let trace = m.trace_latents(&x, &mut ForwardCtx::eval())?;
    let pairs = build_pairs_from_latents(&trace.latents, PairOptions::default(), &mut stream(8, Stream::Pairs))?;
    let mut g = ParamGrad::zeros_for(&m);
    generator_backward(&m, &trace, &d, &pairs, 1.0, &mut g)?;
    let analytic: Vec<f64> =
        g.iter().filter(|(n, _)| groups::generator(n)).flat_map(|(_, t)| t.data().to_vec()).collect();
    let mut probe = m.clone();
    let fd = fd_gradient(
        |p| {
            assign_params(&mut probe, groups::generator, p);
            build_pairs(&probe, &x, PairOptions::default(), &mut stream(8, Stream::Pairs))
                .and_then(|pb| generator_loss(&d, &pb))
                .unwrap_or(f64::NAN)
        },
        &flatten_params(&m, groups::generator),
        1e-5,
    )
    .ok_or("generator loss not finite under perturbation")?;
    errs.push(("generator".into(), rel_err(&analytic, &fd)));

    let pairs = build_pairs(&m, &x, PairOptions::default(), &mut stream(9, Stream::Pairs))?;
    let (_, dg) = discriminator_loss_grad(&d, &pairs)?;
    let mut probe = d.clone();
    let fd = fd_gradient(
        |q| {
            assign_params(&mut probe, groups::all, q);
            -discriminator_loss(&probe, &pairs).unwrap_or(f64::NAN)
        },
        &flatten_params(&d, groups::all),
        1e-5,
    )
    .ok_or("discriminator loss not finite under perturbation")?;
    errs.push(("discriminator".into(), rel_err(&dg.flatten(), &fd)));

    let secs = t0.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let listing: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok((
        worst <= 1e-3 && secs < 60.0 && n_params <= 2000,
        format!("{n_params} params, max rel err {} (<= 1e-3), {secs:.2}s", listing.join(" ")),
    ))
}

fn c3_metrics() -> Check {
    let mut rng = stream(303, Stream::Eval);
    let mut mismatches = 0;
    for _ in 0..200 {
        let np = rng.random_range(1..=25);
        let nn = rng.random_range(1..=25);
        // Coarse grid so ties are frequent.
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(1..=10) as f64 / 10.0).collect() };
        let (p, n) = (draw(np), draw(nn));
        if auroc(&p, &n)? != brute_auroc(&p, &n) || aupr(&p, &n)? != brute_aupr(&p, &n) {
            mismatches += 1;
        }
    }
    let mut vote_mismatch = 0;
    let mut patterns = 0;
    for k in 1..=10usize {
        let cfg = DetectorConfig::uniform(k, 0.5, Aggregation::Majority);
        for bits in 0u32..(1 << k) {
            let votes: Vec<u8> = (0..k).map(|i| ((bits >> i) & 1) as u8).collect();
            let scores: Vec<f64> = votes.iter().map(|&v| if v == 1 { 0.25 } else { 0.75 }).collect();
            if detect_ensemble(&scores, &cfg)? != brute_majority(&votes) {
                vote_mismatch += 1;
            }
            patterns += 1;
        }
    }
    Ok((
        mismatches == 0 && vote_mismatch == 0,
        format!("200 score sets: {mismatches} metric mismatches; {patterns} vote patterns: {vote_mismatch} mismatches"),
    ))
}

fn gmm_arch() -> ArchConfig {
    ArchConfig {
        encoder: Some(EncoderSpec::Mlp { hidden: 64 }),
        latent_dim: Some(16),
        head_dim: Some(2),
        decoder_hidden: Some(32),
        disc_hidden: Some(32),
        dropout: None,
    }
}

fn gmm_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        heads: 4,
        epochs: 50,
        batch_size: 32,
        seed,
        main_optimizer: SgdConfig { lr: 0.003, momentum: 0.9 },
        arch: gmm_arch(),
        ..TrainConfig::default()
    }
}

/// 4-class 2-D mixture: 400 training points, 200 validation, 200 test.
fn gmm_splits(seed: u64) -> dibs::Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let all = make_gaussian_mixture(4, 200, 2, 6.0, seed)?;
    let (train, rest) = split(&all, 0.5, seed)?;
    let (val, test) = split(&rest, 0.5, seed + 1)?;
    Ok((train, val, test))
}

/// Largest class posterior under the generating mixture.
fn bayes_scores(ds: &LabeledDataset, centers: &[Vec<f64>]) -> Vec<f64> {
    ds.features()
        .chunks(2)
        .map(|p| {
            let logits: Vec<f64> =
                centers.iter().map(|c| -0.5 * ((p[0] as f64 - c[0]).powi(2) + (p[1] as f64 - c[1]).powi(2))).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            1.0 / logits.iter().map(|l| (l - top).exp()).sum::<f64>()
        })
        .collect()
}

fn c4_desk_ood() -> Check {
    let mut aurocs = Vec::new();
    let mut details = Vec::new();
    for seed in SEEDS {
        let (train_ds, val, test) = gmm_splits(seed)?;
        let out = train(&gmm_cfg(seed), &train_ds, Some(&val))?;
        let model = &out.trainer.model;
        let (lo, hi) = train_ds.bounding_box();
        let noise = uniform_in_box(test.len(), &lo, &hi, seed + 500)?;
        let set = OodScoreSet::new(member_scores(model, &test)?, member_scores(model, &noise)?)?;
        let report = evaluate(&set, &member_scores(model, &val)?, 0.95)?;
        let pp_in = dibs::uncertainty::predictive_scores(model, &test, 8, &mut stream(seed, Stream::Eval))?;
        let pp_out = dibs::uncertainty::predictive_scores(model, &noise, 8, &mut stream(seed + 1, Stream::Eval))?;
        let centers = mixture_centers(4, 2, 6.0, seed);
        let ceiling = auroc(&bayes_scores(&test, &centers), &bayes_scores(&noise, &centers))?;
        details.push(format!(
            "seed {seed}: mean-score {:.3}, predictive(M=8) {:.3}, true-posterior score {ceiling:.3}",
            report.aggregated_auroc,
            auroc(&pp_in, &pp_out)?
        ));
        aurocs.push(report.aggregated_auroc);
    }
    let mean = aurocs.iter().sum::<f64>() / aurocs.len() as f64;
    Ok((mean >= 0.90, format!("mean auroc {mean:.3} (>= 0.90); {}", details.join("; "))))
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist_cfg(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        heads: 4,
        epochs: 20,
        batch_size: 64,
        seed,
        mode,
        main_optimizer: SgdConfig { lr: 0.01, momentum: 0.9 },
        adv_optimizer: AdamConfig::default(),
        beta: 1e-2,
        kl_mode: KlMode::Explicit,
        arch: ArchConfig {
            encoder: Some(EncoderSpec::Cnn { channels: [8, 16, 16, 32] }),
            latent_dim: Some(64),
            head_dim: Some(16),
            decoder_hidden: Some(64),
            disc_hidden: Some(64),
            dropout: None,
        },
        ..TrainConfig::default()
    }
}

fn c5_mnist() -> Check {
    let t0 = Instant::now();
    let dir = mnist_dir();
    let all = load_idx(dir.join("mnist5k-images-idx3-ubyte"), dir.join("mnist5k-labels-idx1-ubyte"))?;
    let (train_ds, test) = split(&all, 0.8, 0)?;
    let rotated = apply_shift(&test, &ShiftSpec::Rotate { range: (-45.0, 45.0) }, 45)?;
    let mut clean = Vec::new();
    let (mut dibs_rot, mut rand_rot) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let d = train(&mnist_cfg(Mode::Dibs, seed), &train_ds, None)?;
        clean.push(accuracy(&d.trainer.model, &test)?);
        dibs_rot.push(accuracy(&d.trainer.model, &rotated)?);
        let r = train(&mnist_cfg(Mode::RandomEnsemble, seed), &train_ds, None)?;
        rand_rot.push(accuracy(&r.trainer.model, &rotated)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let secs = t0.elapsed().as_secs_f64();
    let (acc, dr, rr) = (mean(&clean), mean(&dibs_rot), mean(&rand_rot));
    let mut failures = Vec::new();
    check(acc >= 0.95, "test accuracy", &mut failures);
    check(dr >= rr, "rotated accuracy vs random ensemble", &mut failures);
    check(secs < 1800.0, "runtime", &mut failures);
    verdict(
        failures,
        format!(
            "train {} / test {}; dibs test acc {acc:.4} (>= 0.95); rotate[-45,45] dibs {dr:.4} vs random {rr:.4} (per seed {:?} vs {:?}); {secs:.0}s (< 1800s)",
            train_ds.len(),
            test.len(),
            dibs_rot.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            rand_rot.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
        ),
    )
}

fn c6_diversity() -> Check {
    let mut ratios = Vec::new();
    for seed in SEEDS {
        let (train_ds, val, _) = gmm_splits(seed)?;
        let on = train(&gmm_cfg(seed), &train_ds, Some(&val))?;
        let off = train(&TrainConfig { adv_weight: 0.0, ..gmm_cfg(seed) }, &train_ds, Some(&val))?;
        let (a, b) = (mean_pairwise_w2(&on.trainer.model, &val)?, mean_pairwise_w2(&off.trainer.model, &val)?);
        ratios.push(a / b);
    }
    let listing: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    Ok((ratios.iter().all(|&r| r >= 1.5), format!("w2 ratio per seed {} (each >= 1.5)", listing.join(" "))))
}

fn c7_beta() -> Check {
    let betas = [1e-4, 1e-2, 1e-1];
    let mut kls = Vec::new();
    for beta in betas {
        let mut total = 0.0;
        for seed in SEEDS {
            let (train_ds, val, _) = gmm_splits(seed)?;
            let out = train(&TrainConfig { beta, kl_mode: KlMode::Explicit, ..gmm_cfg(seed) }, &train_ds, Some(&val))?;
            total += mean_kl(&out.trainer.model, &val)?;
        }
        kls.push(total / SEEDS.len() as f64);
    }
    let ok = kls.windows(2).all(|w| w[1] <= w[0]);
    let listing: Vec<String> = betas.iter().zip(&kls).map(|(b, k)| format!("beta {b:e}: {k:.3}")).collect();
    Ok((ok, format!("mean kl {}", listing.join(", "))))
}

fn c8_exact() -> Check {
    let mut f = Vec::new();
    let ln_half = 0.5f64.ln();

    let m = tiny_model(2)?;
    let x = standard_normal::<f64>(&mut stream(13, Stream::Eval), &[7, 3]);
    let pairs = build_pairs(&m, &x, PairOptions::default(), &mut stream(4, Stream::Pairs))?;
    let mut d = tiny_disc();
    let last = d.net.last_linear_mut().ok_or("no output layer")?;
    last.weight.fill(0.0);
    last.bias.fill(0.0);
    check((generator_loss(&d, &pairs)? - 3.0 * ln_half).abs() < 1e-12, "constant L_G", &mut f);
    check((discriminator_loss(&d, &pairs)? - 3.0 * ln_half).abs() < 1e-12, "constant L_D", &mut f);

    let pq = |k, m, probs: Vec<f64>| PredictionSet::new(k, m, 2, probs);
    check(posterior_predictive(&pq(2, 1, vec![1.0, 0.0, 0.0, 1.0])?) == vec![0.5, 0.5], "predictive K=2", &mut f);
    check(
        posterior_predictive(&pq(1, 3, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5])?) == vec![0.5, 0.5],
        "predictive K=1 M=3",
        &mut f,
    );
    check(aleatoric_variance(&pq(2, 1, vec![1.0, 0.0, 0.0, 1.0])?)? == vec![0.25, 0.25], "aleatoric", &mut f);

    check(mode(&[2, 2, 3], 4) == 2, "mode", &mut f);
    check(mode(&[1, 2], 4) == 1, "mode tie-break", &mut f);
    let single = PredictionSet::new(1, 1, 3, vec![0.2, 0.7, 0.1])?;
    check(modal_prediction(&single) == 1, "single member mode", &mut f);

    check(
        detect_member(0.3, 0.5) == 1 && detect_member(0.5, 0.5) == 1 && detect_member(0.9, 0.5) == 0,
        "detect_member",
        &mut f,
    );
    let maj3 = DetectorConfig::uniform(3, 0.5, Aggregation::Majority);
    let any3 = DetectorConfig::uniform(3, 0.5, Aggregation::Any);
    check(detect_ensemble(&[0.1, 0.1, 0.9], &maj3)? == 1, "majority 2 of 3", &mut f);
    check(detect_ensemble(&[0.1, 0.9, 0.9], &maj3)? == 0, "majority 1 of 3", &mut f);
    check(detect_ensemble(&[0.1, 0.9, 0.9], &any3)? == 1, "any 1 of 3", &mut f);
    check(
        detect_ensemble(&[0.1, 0.9], &DetectorConfig::uniform(2, 0.5, Aggregation::Majority))? == 1,
        "majority boundary",
        &mut f,
    );

    let lat = |mean: Vec<f64>, std: Vec<f64>| {
        let n = mean.len();
        dibs::nets::GaussianLatent::new(
            Tensor::from_vec(&[1, n], mean).unwrap(),
            Tensor::from_vec(&[1, n], std).unwrap(),
        )
    };
    check(kl_gaussian_to_standard(&lat(vec![0.0, 0.0], vec![1.0, 1.0])?)?[0] == 0.0, "kl at prior", &mut f);
    check(
        (kl_gaussian_to_standard(&lat(vec![1.0, 0.0], vec![1.0, 1.0])?)?[0] - 0.5).abs() < 1e-15,
        "kl shifted mean",
        &mut f,
    );

    check(auroc(&[0.9, 0.8], &[0.1, 0.2])? == 1.0, "auroc separated", &mut f);
    check((aupr(&[0.9, 0.4], &[0.6, 0.1])? - 5.0 / 6.0).abs() < 1e-12, "aupr alternating", &mut f);
    check(aupr(&[0.5, 0.5], &[0.5, 0.5])? == 0.5, "aupr all tied", &mut f);
    verdict(
        f,
        "constant-discriminator losses, predictive arithmetic, votes, detectors, kl points, ranking points".into(),
    )
}

fn metrics_text(rows: &[MetricsRow]) -> dibs::Result<String> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, "acceptance", rows)?;
    Ok(String::from_utf8(buf).expect("metrics are utf-8"))
}

fn c9_determinism() -> Check {
    let mut f = Vec::new();
    let all = make_gaussian_mixture(4, 40, 2, 6.0, 9)?;
    let (train_ds, val) = split(&all, 0.75, 9)?;
    let cfg = TrainConfig { epochs: 6, ..gmm_cfg(9) };
    let a = train(&cfg, &train_ds, Some(&val))?;
    let b = train(&cfg, &train_ds, Some(&val))?;
    check(metrics_text(&a.history)? == metrics_text(&b.history)?, "identical metrics", &mut f);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.tar");
    save_checkpoint(&a.trainer, &path)?;
    let back = load_checkpoint(&path)?;
    let x = val.batch::<f32>(&(0..val.len()).collect::<Vec<_>>());
    let bits = |m: &EnsembleModel<f32>| -> dibs::Result<Vec<u32>> {
        let mut out = Vec::new();
        for (i, l) in m.latents(&x)?.iter().enumerate() {
            out.extend(l.mean.data().iter().chain(l.std.data()).map(|v| v.to_bits()));
            out.extend(m.decode(i, &l.mean)?.data().iter().map(|v| v.to_bits()));
        }
        Ok(out)
    };
    check(bits(&a.trainer.model)? == bits(&back.model)?, "forward bits after reload", &mut f);

    let mut first = Trainer::new(cfg.clone(), train_ds.shape(), 4)?;
    let mut rows = Vec::new();
    for _ in 0..3 {
        rows.extend(first.run_epoch(&train_ds, Some(&val))?);
    }
    let mid = dir.path().join("mid.tar");
    save_checkpoint(&first, &mid)?;
    drop(first);
    let mut resumed = load_checkpoint(&mid)?;
    rows.extend(resumed.run(&train_ds, Some(&val))?);
    check(metrics_text(&rows)? == metrics_text(&a.history)?, "resumed trajectory", &mut f);
    check(resumed.model == a.trainer.model, "resumed parameters", &mut f);
    verdict(f, format!("{} metric rows compared, checkpoint round trip, resume at epoch 3 of 6", a.history.len()))
}

fn c10_transfer() -> Check {
    let mut f = Vec::new();
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let (train_ds, val, _) = gmm_splits(seed)?;
        let cfg = gmm_cfg(seed);
        let mut model = train(&cfg, &train_ds, Some(&val))?.trainer.model;
        let (target_train, target_test) = (rotate_points(&train_ds, 45.0)?, rotate_points(&val, 45.0)?);
        before.push(accuracy(&model, &target_test)?);
        let digest = param_digest(&model, groups::encoder);
        transfer_finetune(&mut model, &target_train, 20, &cfg)?;
        check(param_digest(&model, groups::encoder) == digest, "encoder digest", &mut f);
        after.push(accuracy(&model, &target_test)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (b, a) = (mean(&before), mean(&after));
    check(a > b, "finetuned accuracy", &mut f);
    verdict(f, format!("encoder digest unchanged; rotated-target accuracy {b:.3} -> {a:.3} after finetune"))
}
