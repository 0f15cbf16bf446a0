//! Acceptance run: one PASS/FAIL line per criterion, then a nonzero exit if
//! any failed. The desk-scale training criteria take about an hour per
//! model on one CPU core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use earballs_core::audio::{
    audio_distance, audio_distance_with_grad, extract_features, mel_scale, AudioMetric,
    FeatureExtractor, FeatureParams, DEFAULT_SAMPLE_RATE,
};
use earballs_core::datasets::{synth_audio, synth_desk, synth_source, DeskSpec};
use earballs_core::evaluation::{run_sweep, SweepData, SweepParam, SweepRow};
use earballs_core::gan::{
    discriminator_loss, generate, generator_loss, gradient_penalty, load_checkpoint,
    save_checkpoint, AdamConfig, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
    GeneratorObjective, ModelState,
};
use earballs_core::geometry::{
    l2_separates, metric_loss, metric_loss_from_pairs, metric_loss_with_grad, pearson,
    sample_unit_sphere, Metric,
};
use earballs_core::testgen::{
    check_package, generate_test, grade_responses, recheck_separation, write_package, AnswerKey,
    GenerateOptions, ResponseRecord, CHOICES, N_QUERIES,
};
use earballs_core::training::{format_log, TrainConfig, Trainer};
use earballs_core::AudioClip;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-9
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_g() -> GeneratorConfig {
    GeneratorConfig {
        input_dim: 8,
        model_dim: 4,
        output_len: 1024,
        upsample_factor: 4,
        kernel: 25,
    }
}

fn tiny_models(seed: u64) -> (Generator<f64>, Discriminator<f64>) {
    let mut r = rng(seed);
    let g = Generator::new(tiny_g(), &mut r).unwrap();
    let d = Discriminator::new(DiscriminatorConfig::matching(&tiny_g()), &mut r).unwrap();
    (g, d)
}

fn constant_critic(c: f64) -> Discriminator<f64> {
    let mut d = tiny_models(3).1;
    for p in &mut d.params {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let last = d.params.len() - 1;
    d.params[last].data[0] = c;
    d
}

fn clips(n: usize, len: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n * len).map(|_| r.random_range(-0.8..0.8)).collect()
}

fn geometry_properties() -> Result<usize, String> {
    let mut r = rng(100);
    let mut n = 0;
    for trial in 0..200 {
        let bs = r.random_range(3..10);
        let x = sample_unit_sphere(bs, 6, &mut r).unwrap();
        let y: Vec<Vec<f64>> = (0..bs)
            .map(|_| (0..5).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let base = metric_loss(&x, &y, Metric::Euclidean, Metric::Euclidean).unwrap();
        let k = r.random_range(0.01..100.0);
        let ky: Vec<Vec<f64>> = y
            .iter()
            .map(|v| v.iter().map(|a| k * a).collect())
            .collect();
        let scaled = metric_loss(&x, &ky, Metric::Euclidean, Metric::Euclidean).unwrap();
        ensure(rel_close(base, scaled, 1e-12), || {
            format!("scale invariance, trial {trial}: {base} vs {scaled}")
        })?;
        ensure(base >= 0.0, || format!("negative loss {base}"))?;
        let swapped = metric_loss(&y, &x, Metric::Euclidean, Metric::Euclidean).unwrap();
        ensure(rel_close(base, swapped, 1e-12), || {
            format!("role swap {base} vs {swapped}")
        })?;
        // a rotation-free scaled isometry: pad and scale
        let iso: Vec<Vec<f64>> = x
            .iter()
            .map(|v| v.iter().map(|a| 3.5 * a).chain([0.0, 0.0]).collect())
            .collect();
        let zero = metric_loss(&x, &iso, Metric::Euclidean, Metric::Euclidean).unwrap();
        ensure(zero.abs() < 1e-12, || format!("isometry loss {zero}"))?;

        let (_, grads) =
            metric_loss_with_grad(&x, &y, Metric::Euclidean, Metric::Euclidean).unwrap();
        let (i, j) = (r.random_range(0..bs), r.random_range(0..5));
        let h = 1e-6;
        let mut yp = y.clone();
        yp[i][j] += h;
        let mut ym = y.clone();
        ym[i][j] -= h;
        let fd = (metric_loss(&x, &yp, Metric::Euclidean, Metric::Euclidean).unwrap()
            - metric_loss(&x, &ym, Metric::Euclidean, Metric::Euclidean).unwrap())
            / (2.0 * h);
        ensure(rel_close(grads[i][j], fd, 1e-4), || {
            format!("metric gradient {} vs {fd}", grads[i][j])
        })?;

        let u: Vec<f64> = (0..20).map(|_| r.random_range(0.0..5.0)).collect();
        let v: Vec<f64> = (0..20).map(|_| r.random_range(0.0..5.0)).collect();
        let (a, b) = (r.random_range(0.1..10.0), r.random_range(-5.0..5.0));
        let au: Vec<f64> = u.iter().map(|t| a * t + b).collect();
        let (p0, p1) = (pearson(&u, &v).unwrap(), pearson(&au, &v).unwrap());
        ensure(
            (p0 - p1).abs() < 1e-12 && (-1.0..=1.0).contains(&p0),
            || format!("pearson {p0} vs {p1}"),
        )?;

        let cats: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|c| {
                let center = c as f64 * r.random_range(0.0..1.5);
                (0..r.random_range(1..5))
                    .map(|_| {
                        vec![
                            center + r.random_range(-0.5..0.5),
                            r.random_range(-0.5..0.5),
                        ]
                    })
                    .collect()
            })
            .collect();
        let oracle = exhaustive_separation(&cats);
        let got = l2_separates(&cats).unwrap();
        ensure(got == oracle, || {
            format!("l2_separates {got} vs oracle {oracle} on {cats:?}")
        })?;
        n += 1;
    }
    // ‖mean‖ of n uniform unit vectors concentrates at n^{-1/2}
    for n in [100, 1000, 10_000] {
        let pts = sample_unit_sphere(n, 128, &mut r).unwrap();
        ensure(
            pts.iter()
                .all(|p| (p.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() < 1e-6),
            || "sphere norm".into(),
        )?;
        let mean: Vec<f64> = (0..128)
            .map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n as f64)
            .collect();
        let m = mean.iter().map(|a| a * a).sum::<f64>().sqrt() * (n as f64).sqrt();
        ensure((0.8..1.25).contains(&m), || {
            format!("sphere mean norm at n={n} is {m} n^-1/2")
        })?;
    }
    Ok(n)
}

/// Every within-category pair against every member-to-other-category pair.
fn exhaustive_separation(cats: &[Vec<Vec<f64>>]) -> bool {
    let d = |p: &[f64], q: &[f64]| Metric::Euclidean.distance(p, q);
    for (ci, c) in cats.iter().enumerate() {
        for p in c {
            for q in c {
                for s in c {
                    for (oi, o) in cats.iter().enumerate() {
                        if oi != ci && o.iter().any(|t| d(p, q) > d(s, t)) {
                            return false;
                        }
                    }
                }
            }
        }
    }
    true
}

fn feature_properties() -> Result<usize, String> {
    let mut r = rng(200);
    let params = FeatureParams::default();
    let mut n = 0;
    for _ in 0..500 {
        let (a, b): (f64, f64) = (r.random_range(0.0..8000.0), r.random_range(0.0..8000.0));
        if a != b {
            let (lo, hi) = (a.min(b), a.max(b));
            ensure(mel_scale(lo).unwrap() < mel_scale(hi).unwrap(), || {
                format!("mel monotone at {lo}, {hi}")
            })?;
        }
    }
    for _ in 0..20 {
        let len = r.random_range(1024..6000);
        let clip = AudioClip::new(clips(1, len, &mut r), DEFAULT_SAMPLE_RATE);
        let f = extract_features(&clip, &params).unwrap();
        ensure(f.shape() == ((len - 1024) / 256 + 1, 80), || {
            format!("shape {:?} for L={len}", f.shape())
        })?;
        n += 1;
    }
    for mode in [AudioMetric::L2, AudioMetric::Mfcc] {
        for _ in 0..3 {
            let y1 = AudioClip::new(clips(1, 1536, &mut r), DEFAULT_SAMPLE_RATE);
            let y2 = AudioClip::new(clips(1, 1536, &mut r), DEFAULT_SAMPLE_RATE);
            let d12 = audio_distance(&y1, &y2, mode, &params).unwrap();
            let d21 = audio_distance(&y2, &y1, mode, &params).unwrap();
            ensure(rel_close(d12, d21, 1e-12), || format!("{mode} symmetry"))?;
            ensure(
                audio_distance(&y1, &y1, mode, &params).unwrap() == 0.0,
                || format!("{mode} d(y,y)"),
            )?;
            let (_, g) = audio_distance_with_grad(&y1, &y2, mode, &params).unwrap();
            for _ in 0..4 {
                let i = r.random_range(0..1536);
                let h = 1e-5;
                let mut p = y1.clone();
                p.samples[i] += h;
                let mut m = y1.clone();
                m.samples[i] -= h;
                let fd = (audio_distance(&p, &y2, mode, &params).unwrap()
                    - audio_distance(&m, &y2, mode, &params).unwrap())
                    / (2.0 * h);
                ensure(rel_close(g[i], fd, 1e-3), || {
                    format!("{mode} gradient {} vs {fd}", g[i])
                })?;
            }
            n += 1;
        }
    }
    let y1 = AudioClip::new(clips(1, 2048, &mut r), DEFAULT_SAMPLE_RATE);
    let y2 = AudioClip::new(clips(1, 2048, &mut r), DEFAULT_SAMPLE_RATE);
    let alpha = -0.375;
    let scale = |c: &AudioClip| {
        AudioClip::new(
            c.samples.iter().map(|s| alpha * s).collect(),
            DEFAULT_SAMPLE_RATE,
        )
    };
    let d = audio_distance(&y1, &y2, AudioMetric::L2, &params).unwrap();
    let ds = audio_distance(&scale(&y1), &scale(&y2), AudioMetric::L2, &params).unwrap();
    ensure(rel_close(ds, alpha.abs() * d, 1e-12), || {
        format!("amplitude sensitivity {ds} vs {}", alpha.abs() * d)
    })?;
    Ok(n)
}

fn gan_properties() -> Result<usize, String> {
    let mut n = 0;
    let (mut g, mut d) = tiny_models(300);
    let mut r = rng(301);
    // biases start at zero, which can sit a leaky ReLU exactly on its kink
    for p in g
        .params
        .iter_mut()
        .chain(d.params.iter_mut())
        .filter(|p| p.name.ends_with(".b"))
    {
        p.data
            .iter_mut()
            .for_each(|v| *v += r.random_range(-0.05..0.05));
    }
    let (g, d) = (g, d);
    let fx = FeatureExtractor::new(FeatureParams::default(), DEFAULT_SAMPLE_RATE).unwrap();
    let h = 1e-6;

    let batch = 2;
    let x: Vec<f64> = sample_unit_sphere(batch, 8, &mut r).unwrap().concat();
    let a = clips(batch, 1024, &mut r);
    let eval_d = |d: &Discriminator<f64>, want: bool| {
        discriminator_loss(
            &g,
            d,
            &x,
            &a,
            batch,
            10.0,
            &mut rng(302),
            &mut rng(303),
            want,
        )
        .unwrap()
    };
    let grads = eval_d(&d, true).1.unwrap();
    for (pi, p) in d.params.iter().enumerate() {
        let j = r.random_range(0..p.data.len());
        let (mut dp, mut dm) = (d.clone(), d.clone());
        dp.params[pi].data[j] += h;
        dm.params[pi].data[j] -= h;
        let fd = (eval_d(&dp, false).0.total - eval_d(&dm, false).0.total) / (2.0 * h);
        ensure(rel_close(grads[pi][j], fd, 1e-3), || {
            format!("D loss {}[{j}]: {} vs {fd}", p.name, grads[pi][j])
        })?;
        n += 1;
    }

    let inputs = sample_unit_sphere(3, 8, &mut r).unwrap();
    for (target, uri) in [(AudioMetric::Mfcc, false), (AudioMetric::L2, true)] {
        let obj = GeneratorObjective {
            lambda_metric: 3.0,
            source_metric: Metric::Euclidean,
            target_metric: target,
            features: &fx,
        };
        let eval_g = |g: &Generator<f64>, want: bool| {
            generator_loss(g, &d, &inputs, &obj, uri, &mut rng(304), want).unwrap()
        };
        let grads = eval_g(&g, true).1.unwrap();
        for (pi, p) in g.params.iter().enumerate() {
            let j = r.random_range(0..p.data.len());
            let (mut gp, mut gm) = (g.clone(), g.clone());
            gp.params[pi].data[j] += h;
            gm.params[pi].data[j] -= h;
            let fd = (eval_g(&gp, false).0.total - eval_g(&gm, false).0.total) / (2.0 * h);
            ensure(rel_close(grads[pi][j], fd, 1e-3), || {
                format!("G loss {target} {}[{j}]: {} vs {fd}", p.name, grads[pi][j])
            })?;
            n += 1;
        }

        // descent: a small step along −∇ lowers the metric term
        if uri {
            let (before, grads) = eval_g(&g, true);
            let grads = grads.unwrap();
            let sq: f64 = grads.iter().flatten().map(|v| v * v).sum();
            let eta = 1e-3 / sq.sqrt();
            let mut stepped = g.clone();
            for (p, gr) in stepped.params.iter_mut().zip(&grads) {
                p.data.iter_mut().zip(gr).for_each(|(w, gv)| *w -= eta * gv);
            }
            let (after, _) = eval_g(&stepped, false);
            ensure(
                after.metric < before.metric && before.total - after.total >= 0.5 * eta * sq,
                || format!("descent {} -> {}", before.total, after.total),
            )?;
        }
    }

    for seed in 0..100 {
        let mut r = rng(400 + seed);
        let mut g = Generator::<f32>::new(GeneratorConfig::desk(16), &mut r).unwrap();
        for p in &mut g.params {
            let k: f32 = r.random_range(0.5..20.0);
            p.data.iter_mut().for_each(|v| *v *= k);
        }
        let x: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..16).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        for c in generate(&g, &x).unwrap() {
            ensure(
                c.samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0),
                || format!("range at seed {seed}"),
            )?;
        }
    }
    n += 100;

    let cfg = GeneratorConfig::desk(16);
    let state = ModelState::new(
        cfg.clone(),
        DiscriminatorConfig::matching(&cfg),
        AdamConfig::default(),
        &mut rng(500),
    )
    .unwrap();
    let x = sample_unit_sphere(3, 16, &mut rng(501)).unwrap();
    let before = state.generate(&x).unwrap();
    let path = scratch("checkpoint").join("m.ckpt");
    save_checkpoint(&state, serde_json::Value::Null, &path).map_err(|e| e.to_string())?;
    let after = load_checkpoint(&path)
        .map_err(|e| e.to_string())?
        .0
        .generate(&x)
        .unwrap();
    let same = before.iter().zip(&after).all(|(a, b)| {
        a.samples
            .iter()
            .zip(&b.samples)
            .all(|(p, q)| p.to_bits() == q.to_bits())
    });
    ensure(same, || "save/load changed generated audio".into())?;
    Ok(n + 1)
}

fn property_suites() -> Outcome {
    let t = Instant::now();
    let g = geometry_properties()?;
    let f = feature_properties()?;
    let m = gan_properties()?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.0} s, limit 300 s"))?;
    Ok(format!(
        "geometry {g}, features {f}, gan {m} randomized cases in {secs:.1} s (< 300 s)"
    ))
}

fn mfcc_shape() -> Outcome {
    let clip = AudioClip::new(clips(1, 16384, &mut rng(600)), DEFAULT_SAMPLE_RATE);
    let f = extract_features(&clip, &FeatureParams::default()).map_err(|e| e.to_string())?;
    ensure(f.shape() == (61, 80) && f.as_slice().len() == 4880, || {
        format!("shape {:?}", f.shape())
    })?;
    Ok("16384 samples -> 61 x 80 = 4880 values".into())
}

fn loss_fixtures() -> Outcome {
    let m =
        metric_loss_from_pairs(&[1.0, 1.0, 2.0], &[1.0, 1.0, 1.0]).map_err(|e| e.to_string())?;
    ensure((m - 1.0 / 6.0).abs() <= 1e-9, || format!("metric loss {m}"))?;
    let mut r = rng(700);
    let d = constant_critic(0.7);
    let real = clips(4, 1024, &mut r);
    let fake = clips(4, 1024, &mut r);
    let gp = gradient_penalty(&d, &real, &fake, 4, &mut rng(701), &mut rng(702))
        .map_err(|e| e.to_string())?;
    ensure((gp - 1.0).abs() <= 1e-9, || {
        format!("gradient penalty {gp}")
    })?;
    let g = tiny_models(703).0;
    let x: Vec<f64> = sample_unit_sphere(4, 8, &mut r).unwrap().concat();
    let (dl, _) = discriminator_loss(
        &g,
        &constant_critic(-1.3),
        &x,
        &real,
        4,
        10.0,
        &mut rng(704),
        &mut rng(705),
        false,
    )
    .map_err(|e| e.to_string())?;
    ensure((dl.total - 10.0).abs() <= 1e-9, || {
        format!("discriminator loss {}", dl.total)
    })?;
    Ok(format!(
        "metric {m:.12}, gp {gp:.12}, d_loss {:.12} (tol 1e-9)",
        dl.total
    ))
}

struct DeskResults {
    rows: Vec<SweepRow>,
    minutes: f64,
}

fn desk_sweep() -> Result<DeskResults, String> {
    let data = synth_desk(&DeskSpec::default(), &mut rng(1)).map_err(|e| e.to_string())?;
    let base = TrainConfig {
        seed: 1,
        ..TrainConfig::desk()
    };
    let t = Instant::now();
    let rows = run_sweep(
        &base,
        SweepParam::LambdaMetric,
        &[0.0, 1.0, 3.0],
        SweepData {
            train: &data.train,
            validation: Some(&data.validation),
            test: &data.test,
            corpus: &data.corpus,
        },
        scratch("desk-sweep"),
    )
    .map_err(|e| e.to_string())?;
    Ok(DeskResults {
        rows,
        minutes: t.elapsed().as_secs_f64() / 60.0,
    })
}

fn desk_end_to_end(res: &Result<DeskResults, String>) -> Outcome {
    let res = res.as_ref().map_err(Clone::clone)?;
    let pick = |v: f64| {
        res.rows
            .iter()
            .find(|r| r.value == v)
            .ok_or(format!("no run for lambda {v}"))
            .and_then(|r| r.result.clone())
    };
    let main = pick(3.0)?;
    let baseline = pick(0.0)?;
    let line = format!(
        "lambda 3: PC {:.4} (>= 0.90), NCA {:.4} (>= 0.90), MAE {:.4} (<= 0.08); baseline lambda 0: |PC| {:.4} (<= 0.3); {:.1} min per run",
        main.pc,
        main.nca,
        main.mae,
        baseline.pc.abs(),
        res.minutes / res.rows.len() as f64
    );
    if main.pc >= 0.90 && main.nca >= 0.90 && main.mae <= 0.08 && baseline.pc.abs() <= 0.3 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn sweep_trend(res: &Result<DeskResults, String>) -> Outcome {
    let res = res.as_ref().map_err(Clone::clone)?;
    let pcs: Vec<(f64, f64)> = res
        .rows
        .iter()
        .map(|r| {
            r.result
                .as_ref()
                .map(|e| (r.value, e.pc))
                .map_err(Clone::clone)
        })
        .collect::<Result<_, _>>()?;
    let line = pcs
        .iter()
        .map(|(v, p)| format!("PC({v}) = {p:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    if pcs.windows(2).all(|w| w[1].1 >= w[0].1 - 0.05) {
        Ok(format!("{line}; non-decreasing within 0.05"))
    } else {
        Err(format!("{line}; decreases by more than 0.05"))
    }
}

/// Validation MAE before training against the last validated row of the
/// lambda 3 log; it must fall at least fivefold.
fn mae_trend(res: &Result<DeskResults, String>) -> Outcome {
    let res = res.as_ref().map_err(Clone::clone)?;
    let row = res
        .rows
        .iter()
        .find(|r| r.value == 3.0)
        .ok_or("no lambda 3 run")?;
    let read = |name: &str| {
        std::fs::read_to_string(row.run_dir.join(name)).map_err(|e| format!("{name}: {e}"))
    };
    let initial: f64 = read("initial_validation.txt")?
        .lines()
        .find_map(|l| l.strip_prefix("mae = "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or("no initial mae")?;
    let log = read("train_log.csv")?;
    let last = log
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(5).and_then(|v| v.parse::<f64>().ok()))
        .last()
        .ok_or("no validated row")?;
    let line = format!(
        "validation MAE {initial:.4} -> {last:.4} ({:.1}x, need >= 5x)",
        initial / last
    );
    if last * 5.0 <= initial {
        Ok(line)
    } else {
        Err(line)
    }
}

fn testgen_packages() -> Outcome {
    let data = synth_desk(&DeskSpec::default(), &mut rng(800)).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::desk();
    let mut init = rng(801);
    let g = Generator::<f32>::new(cfg.generator_config(data.test.dimension), &mut init)
        .map_err(|e| e.to_string())?;
    let root = scratch("packages");
    let (mut valid, mut separated, mut attempts) = (0, 0, 0u64);
    let mut keys = Vec::new();
    for i in 0..100 {
        let mut r = rng(802);
        r.set_stream(i);
        let opts = GenerateOptions {
            package_id: format!("pkg-{i:03}"),
            model_id: "desk-init".into(),
            seed: 802,
            max_attempts: None,
        };
        let pkg = generate_test(&g, &data.test, &opts, &mut r).map_err(|e| e.to_string())?;
        let dir = root.join(&opts.package_id);
        write_package(&pkg, &dir, None).map_err(|e| e.to_string())?;
        let check = check_package(&dir);
        if check.is_valid() {
            valid += 1;
        } else {
            eprintln!("{}: {:?}", opts.package_id, check.violations);
        }
        if recheck_separation(&pkg.log, &data.test).map_err(|e| e.to_string())? {
            separated += 1;
        }
        attempts += pkg.log.attempts;
        keys.push(pkg.key);
    }

    let mut r = rng(803);
    let trials = 100_000;
    let responses: Vec<ResponseRecord> = (0..trials)
        .map(|t| ResponseRecord {
            package_id: keys[t % keys.len()].package_id.clone(),
            answers: (0..N_QUERIES)
                .map(|q| (q.to_string(), CHOICES[r.random_range(0..3)].to_string()))
                .collect(),
            memorability: CHOICES[r.random_range(0..3)].into(),
            participant_id: format!("random-{t}"),
            started_at: String::new(),
            submitted_at: String::new(),
            expired: false,
        })
        .collect();
    let grades = grade_responses(&responses, &keys).map_err(|e| e.to_string())?;
    let hsa = grades.models[0].mean_hsa;
    let line = format!(
        "{valid}/100 valid, {separated}/100 separated, {attempts} draws in total; random HSA {hsa:.4} over {trials} (1/3 +- 0.01)"
    );
    if valid == 100 && separated == 100 && (hsa - 1.0 / 3.0).abs() <= 0.01 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// `n` respondents to one package whose per-person correct counts and
/// memorability hits are given.
fn fixture(
    model: &str,
    correct: &[usize],
    memorable: usize,
) -> (Vec<ResponseRecord>, Vec<AnswerKey>) {
    let mut keys = Vec::new();
    let mut responses = Vec::new();
    for (i, &c) in correct.iter().enumerate() {
        let answers: Vec<&str> = (0..N_QUERIES).map(|q| CHOICES[q % 3]).collect();
        let key = AnswerKey {
            package_id: format!("{model}-{i}"),
            answers: answers
                .iter()
                .enumerate()
                .map(|(q, a)| (q.to_string(), a.to_string()))
                .collect(),
            memorability: "B".into(),
            model_id: model.into(),
            seed: 0,
        };
        let given = answers
            .iter()
            .enumerate()
            .map(|(q, a)| {
                let wrong = CHOICES[(q + 1) % 3];
                (
                    q.to_string(),
                    if q < c {
                        a.to_string()
                    } else {
                        wrong.to_string()
                    },
                )
            })
            .collect();
        responses.push(ResponseRecord {
            package_id: key.package_id.clone(),
            answers: given,
            memorability: if i < memorable {
                "B".into()
            } else {
                "C".into()
            },
            participant_id: format!("{model}-s{i}"),
            started_at: String::new(),
            submitted_at: String::new(),
            expired: false,
        });
        keys.push(key);
    }
    (responses, keys)
}

fn grading_fixtures() -> Outcome {
    let rows = [
        (
            "mfcc",
            vec![5, 5, 5, 5, 5, 5, 5, 5, 8],
            7usize,
            0.667,
            5,
            8,
            0.778,
        ),
        ("l2", vec![4, 4, 5, 5, 6, 8], 6, 0.667, 4, 8, 1.0),
    ];
    let mut parts = Vec::new();
    for (model, correct, mem, hsa, lo, hi, hsm) in rows {
        let (responses, keys) = fixture(model, &correct, mem);
        let g = grade_responses(&responses, &keys).map_err(|e| e.to_string())?;
        let s = &g.models[0];
        let matches = s.participants == correct.len()
            && (s.mean_hsa - hsa).abs() < 5e-4
            && s.min_correct == lo
            && s.max_correct == hi
            && (s.mean_hsm - hsm).abs() < 5e-4;
        let rendered = format!(
            "{model}: n {} HSA {:.3} range {}-{} HSM {:.3}",
            s.participants, s.mean_hsa, s.min_correct, s.max_correct, s.mean_hsm
        );
        ensure(matches, || {
            format!("{rendered} does not reproduce the expected row")
        })?;
        parts.push(rendered);
    }
    Ok(parts.join("; "))
}

fn determinism() -> Outcome {
    let mut r = rng(900);
    let src = synth_source(4, 8, 8, 0.1, &mut r).unwrap();
    let val = synth_source(4, 2, 8, 0.1, &mut r).unwrap();
    let corpus = synth_audio(16, 1024, &mut r).unwrap();
    let cfg = TrainConfig {
        steps: 100,
        batch_size: 4,
        model_dim: 4,
        output_len: 1024,
        validate_every: 25,
        seed: 7,
        ..TrainConfig::desk()
    };
    let full = |c: &TrainConfig| -> Result<(String, Vec<u8>), String> {
        let mut t =
            Trainer::new(&src, Some(&val), &corpus, c.clone()).map_err(|e| e.to_string())?;
        t.run(|_, _| Ok(())).map_err(|e| e.to_string())?;
        let p = scratch("determinism").join(format!("{}.ckpt", rand::random::<u32>()));
        t.save(&p).map_err(|e| e.to_string())?;
        Ok((format_log(t.log()), std::fs::read(&p).unwrap()))
    };
    let (log_a, ckpt_a) = full(&cfg)?;
    let (log_b, _) = full(&cfg)?;
    ensure(log_a == log_b, || {
        "two identical runs logged differently".into()
    })?;

    let dir = scratch("resume");
    let mut half = Trainer::new(
        &src,
        Some(&val),
        &corpus,
        TrainConfig {
            steps: 50,
            ..cfg.clone()
        },
    )
    .map_err(|e| e.to_string())?;
    half.run(|_, _| Ok(())).map_err(|e| e.to_string())?;
    half.save(dir.join("half.ckpt"))
        .map_err(|e| e.to_string())?;
    let mut rest = Trainer::resume(dir.join("half.ckpt"), &src, Some(&val), &corpus)
        .map_err(|e| e.to_string())?;
    rest.set_steps(100);
    rest.run(|_, _| Ok(())).map_err(|e| e.to_string())?;
    rest.save(dir.join("rest.ckpt"))
        .map_err(|e| e.to_string())?;
    let log_r = format_log(rest.log());
    ensure(log_r == log_a, || {
        "50+50 resumed log differs from the 100-step log".into()
    })?;
    let ckpt_r = std::fs::read(dir.join("rest.ckpt")).unwrap();
    ensure(ckpt_r == ckpt_a, || {
        "50+50 resumed checkpoint differs from the 100-step checkpoint".into()
    })?;
    Ok(format!("{} log rows byte-identical across runs; 50+50 resume matches 100 steps (log and checkpoint)", log_a.lines().count() - 1))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or("panic".into()))
        });
        match out {
            Ok(msg) => println!("PASS {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    };
    report("property suites", &mut property_suites);
    report("mfcc shape", &mut mfcc_shape);
    report("loss fixtures", &mut loss_fixtures);
    report("testgen", &mut testgen_packages);
    report("grading fixtures", &mut grading_fixtures);
    report("determinism", &mut determinism);
    if std::env::var_os("EARBALLS_SKIP_DESK").is_some() {
        println!("SKIP desk end-to-end: EARBALLS_SKIP_DESK is set");
        println!("SKIP sweep trend: EARBALLS_SKIP_DESK is set");
        println!("SKIP desk MAE trend: EARBALLS_SKIP_DESK is set");
    } else {
        let desk = desk_sweep();
        report("desk end-to-end", &mut || desk_end_to_end(&desk));
        report("sweep trend", &mut || sweep_trend(&desk));
        report("desk MAE trend", &mut || mae_trend(&desk));
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
