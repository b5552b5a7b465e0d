//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::process::ExitCode;
use std::time::Instant;

use dple_core::adapter::NoiseMode;
use dple_core::cli::{gradient_check, GRADCHECK_TOLERANCE};
use dple_core::config::Config;
use dple_core::eval::{
    ablation_suite, base_to_novel, generate_synthetic_dataset, harmonic_mean, AblationAxis,
    EmbeddingDataset, SyntheticSpec,
};
use dple_core::format::{decode, encode, read_file, write_file, Section};
use dple_core::grad::Tensor;
use dple_core::learn::{init_prompt_state, train, FrozenBackbone, TrainReport};
use dple_core::qnum::{
    quaternion_linear_forward, Quaternion, QuaternionLinear, QuaternionTensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn hm_values() -> Outcome {
    let a = harmonic_mean(64.50, 60.30);
    let b = harmonic_mean(95.80, 66.20);
    outcome(
        (a - 62.33).abs() <= 0.01 && (b - 78.30).abs() <= 0.01,
        format!("HM(64.50, 60.30) = {a:.4}, HM(95.80, 66.20) = {b:.4}"),
    )
}

/// Left-multiplication matrix of `(r, x, y, z)` written out element by element.
fn left_matrix(r: f64, x: f64, y: f64, z: f64) -> [[f64; 4]; 4] {
    [[r, -x, -y, -z], [x, r, -z, y], [y, z, r, -x], [z, -y, x, r]]
}

fn quaternion_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..120 {
        let d_in = rng.gen_range(1..6);
        let d_out = rng.gen_range(1..6);
        let batch = rng.gen_range(1..4);
        let w: Vec<Tensor> = (0..4).map(|_| Tensor::normal(&[d_out, d_in], 1.0, &mut rng)).collect();
        let mut layer =
            QuaternionLinear::from_weights(w[0].clone(), w[1].clone(), w[2].clone(), w[3].clone())
                .unwrap();
        if case % 2 == 1 {
            let b: Vec<Tensor> = (0..4).map(|_| Tensor::normal(&[d_out], 1.0, &mut rng)).collect();
            layer.bias = Some(
                QuaternionTensor::new(b[0].clone(), b[1].clone(), b[2].clone(), b[3].clone()).unwrap(),
            );
        }
        let q: Vec<Tensor> = (0..4).map(|_| Tensor::normal(&[batch, d_in], 1.0, &mut rng)).collect();
        let input =
            QuaternionTensor::new(q[0].clone(), q[1].clone(), q[2].clone(), q[3].clone()).unwrap();
        let got = quaternion_linear_forward(&layer, &input).unwrap();

        // dense real operator on the unit-interleaved vector [r0 x0 y0 z0 r1 ...]
        let mut dense = vec![vec![0.0; 4 * d_in]; 4 * d_out];
        for o in 0..d_out {
            for i in 0..d_in {
                let at = |c: usize| w[c].data()[o * d_in + i];
                let blk = left_matrix(at(0), at(1), at(2), at(3));
                for a in 0..4 {
                    for b in 0..4 {
                        dense[4 * o + a][4 * i + b] = blk[a][b];
                    }
                }
            }
        }
        for s in 0..batch {
            let v: Vec<f64> = (0..4 * d_in).map(|t| q[t % 4].data()[s * d_in + t / 4]).collect();
            for row in 0..4 * d_out {
                let (o, comp) = (row / 4, row % 4);
                let mut want: f64 = dense[row].iter().zip(&v).map(|(a, b)| a * b).sum();
                if let Some(bias) = &layer.bias {
                    want += bias.components()[comp].data()[o];
                }
                let have = got.components()[comp].data()[s * d_out + o];
                worst = worst.max((have - want).abs());
            }
        }
    }

    let (i, j, k) = (Quaternion::I, Quaternion::J, Quaternion::K);
    let minus_one = Quaternion::new(-1.0, 0.0, 0.0, 0.0);
    let mut ident_err = 0.0f64;
    for p in [i * i, j * j, k * k, i * j * k] {
        for (a, b) in p.to_array().iter().zip(minus_one.to_array()) {
            ident_err = ident_err.max((a - b).abs());
        }
    }
    for _ in 0..200 {
        let mut draw = || Quaternion::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let (a, b) = (draw(), draw());
        ident_err = ident_err.max(((a * b).norm() - a.norm() * b.norm()).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && ident_err <= 1e-10 && secs < 1.0,
        format!("120 layers, max abs err {worst:.2e}; identities {ident_err:.2e}; {secs:.3}s"),
    )
}

fn gradient_criterion() -> Outcome {
    let started = Instant::now();
    match gradient_check(0, 1e-6, false) {
        Ok(o) => {
            let secs = started.elapsed().as_secs_f64();
            let groups: Vec<String> = o.groups.iter().map(|(g, e)| format!("{g} {e:.1e}")).collect();
            outcome(
                o.passed && o.max_rel_error <= GRADCHECK_TOLERANCE && secs < 30.0,
                format!("max rel err {:.2e} ({}); {secs:.2}s", o.max_rel_error, groups.join(", ")),
            )
        }
        Err(e) => outcome(false, format!("gradient check errored: {e}")),
    }
}

fn default_data() -> EmbeddingDataset {
    generate_synthetic_dataset(&SyntheticSpec::default()).expect("default dataset")
}

fn run_default(config: &Config, data: &EmbeddingDataset) -> TrainReport {
    let backbone = FrozenBackbone::new(&config.dims, config.train.encoder_seed).unwrap();
    let mut state = init_prompt_state(&config.train, &config.dims);
    train(&config.train, &config.dims, data, &backbone, &mut state).expect("training run")
}

fn end_to_end(report: &TrainReport, data: &EmbeddingDataset) -> Outcome {
    let n_novel = data.records_of(&data.novel).len() as f64;
    let chance = 1.0 / data.novel.len() as f64;
    let bar = chance + 3.0 * (chance * (1.0 - chance) / n_novel).sqrt();
    let pass = report.acc_base >= 0.95
        && report.acc_novel > bar
        && report.final_train_loss < report.initial_train_loss
        && report.wall_seconds < 60.0;
    outcome(
        pass,
        format!(
            "base {:.4} (>= 0.95), novel {:.4} (> {:.4}), loss {:.4} -> {:.4}, {:.1}s",
            report.acc_base,
            report.acc_novel,
            bar,
            report.initial_train_loss,
            report.final_train_loss,
            report.wall_seconds
        ),
    )
}

fn ablation_structure(data: &EmbeddingDataset, checksums_ok: &mut bool) -> Outcome {
    let cells = match ablation_suite(&Config::default(), data) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("ablation suite errored: {e}")),
    };
    let finite = cells.iter().all(|c| {
        c.report.losses.iter().all(|l| l.is_finite()) && c.report.final_train_loss.is_finite()
    });
    *checksums_ok &= cells
        .iter()
        .all(|c| c.report.frozen_checksum_before == c.report.frozen_checksum_after);
    let probe = |v: &str| {
        cells
            .iter()
            .find(|c| c.axis == AblationAxis::Branch && c.value == v)
            .and_then(|c| c.report.probe_loss)
    };
    let (pl, pv, both) = (probe("PL"), probe("PV"), probe("PL+PV"));
    let directional = match (pl, pv, both) {
        (Some(pl), Some(pv), Some(both)) => both <= pl && both <= pv,
        _ => false,
    };
    outcome(
        cells.len() == 12 && finite && directional,
        format!(
            "{} cells, finite {finite}; loss after 50 steps PL+PV {} vs PL {} / PV {}",
            cells.len(),
            fmt_opt(both),
            fmt_opt(pl),
            fmt_opt(pv)
        ),
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn noise_contract(data: &EmbeddingDataset) -> Outcome {
    // one full-subset batch per epoch, lr 0: any step-to-step change comes from noise
    let probe = |mode: NoiseMode| {
        let mut c = Config::default();
        c.train.lr = 0.0;
        c.train.batch = c.train.shots * data.base.len();
        c.train.epochs = 3;
        c.train.noise_mode = mode;
        run_default(&c, data)
    };
    let noisy = probe(NoiseMode::Language);
    let quiet = probe(NoiseMode::Off);
    let spread = |r: &TrainReport| {
        r.losses.windows(2).map(|w| (w[0] - w[1]).abs()).fold(0.0, f64::max)
    };
    let fresh = noisy.losses.len() == 3 && spread(&noisy) > 1e-6;
    let still = spread(&quiet) < 1e-9;

    let mut c = Config::default();
    c.train.max_steps = 40;
    let backbone = FrozenBackbone::new(&c.dims, c.train.encoder_seed).unwrap();
    let mut state = init_prompt_state(&c.train, &c.dims);
    let trained = train(&c.train, &c.dims, data, &backbone, &mut state).unwrap();
    let e1 = base_to_novel(&backbone, &state, &c, data, &trained.train_indices).unwrap();
    let e2 = base_to_novel(&backbone, &state, &c, data, &trained.train_indices).unwrap();
    let eval_same = e1 == e2;

    let mut off = Config::default();
    off.train.noise_mode = NoiseMode::Off;
    off.train.max_steps = 40;
    let r1 = run_default(&off, data);
    let r2 = run_default(&off, data);
    let off_det = r1.same_outcome(&r2);
    outcome(
        fresh && still && eval_same && off_det,
        format!(
            "language step spread {:.2e}, off spread {:.2e}, evals identical {eval_same}, off runs identical {off_det}",
            spread(&noisy),
            spread(&quiet)
        ),
    )
}

fn dple_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let specials = [0.0, -0.0, f64::MIN_POSITIVE / 2.0, f64::MAX, -1e-300, f64::EPSILON];
    let mut sections = Vec::new();
    for n in 0..100 {
        let rank = 1 + n % 3;
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..6)).collect();
        let mut t = Tensor::normal(&shape, 10.0, &mut rng);
        if n % 7 == 0 {
            t.data_mut()[0] = specials[n % specials.len()];
        }
        sections.push(Section::new(format!("t{n}"), t));
    }
    let bits = |s: &[Section]| -> Vec<(String, Vec<usize>, Vec<u64>)> {
        s.iter()
            .map(|x| {
                (
                    x.name.clone(),
                    x.tensor.shape().to_vec(),
                    x.tensor.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    let bytes = encode(&sections).unwrap();
    let memory_ok = bits(&decode(&bytes).unwrap()) == bits(&sections);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roundtrip.dple");
    write_file(&path, &sections).unwrap();
    let disk_ok = bits(&read_file(&path).unwrap()) == bits(&sections);
    outcome(
        memory_ok && disk_ok,
        format!("100 tensors ranks 1-3, {} bytes, memory {memory_ok}, disk {disk_ok}", bytes.len()),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "harmonic mean", hm_values()));
    results.push((2, "quaternion oracle", quaternion_oracle()));
    results.push((3, "gradient check", gradient_criterion()));

    let data = default_data();
    let config = Config::default();
    let first = run_default(&config, &data);
    results.push((4, "end-to-end training", end_to_end(&first, &data)));

    let mut checksums_ok = first.frozen_checksum_before == first.frozen_checksum_after;
    let ablation = ablation_structure(&data, &mut checksums_ok);
    results.push((5, "ablation structure", ablation));
    results.push((
        6,
        "frozen weights",
        outcome(checksums_ok, "encoder checksums unchanged across all runs of 4 and 5"),
    ));

    let second = run_default(&config, &data);
    let identical = first.same_outcome(&second)
        && first
            .losses
            .iter()
            .zip(&second.losses)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    results.push((
        7,
        "determinism",
        outcome(identical, format!("{} losses compared bitwise", first.losses.len())),
    ));
    results.push((8, "noise contract", noise_contract(&data)));
    results.push((9, "DPLE round-trip", dple_round_trip()));

    let mut all = true;
    for (n, name, o) in &results {
        all &= o.pass;
        println!(
            "criterion {n} [{name}]: {} : {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
