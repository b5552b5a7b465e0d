use dple_core::grad::{finite_diff_check, Primitive, Tape, Tensor, Var};
use dple_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> dple_core::Result<Var>>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduce any tensor to a scalar through a fixed random weighting so every
/// output coordinate contributes a distinct amount.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> dple_core::Result<Var> {
    let w = Tensor::normal(tape.shape(x), 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.mean_all(p)
}

fn check(name: &str, shapes: &[&[usize]], program: Program) {
    let mut r = rng(name.len() as u64);
    let params: Vec<Tensor> = shapes.iter().map(|s| Tensor::normal(s, 1.0, &mut r)).collect();
    let report = finite_diff_check(program, &params, 1e-6).unwrap();
    assert!(
        report.max_rel_error <= 1e-6,
        "{name}: max rel err {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn every_primitive_matches_central_differences() {
    let cases: Vec<(&str, Vec<&[usize]>, Program)> = vec![
        ("add", vec![&[2, 3], &[3]], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 1)
        })),
        ("sub", vec![&[2, 3], &[2, 3]], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 2)
        })),
        ("mul", vec![&[4], &[4]], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 3)
        })),
        ("matmul", vec![&[2, 3], &[3, 4]], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 4)
        })),
        ("batched matmul", vec![&[2, 2, 3], &[2, 3, 2]], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 5)
        })),
        ("transpose", vec![&[2, 3, 4]], Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 6)
        })),
        ("concat", vec![&[2, 3], &[2, 2]], Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, 7)
        })),
        ("slice", vec![&[3, 5]], Box::new(|t, v| {
            let y = t.slice(v[0], 1, 1, 3)?;
            weighted_sum(t, y, 8)
        })),
        ("index_select", vec![&[3, 2]], Box::new(|t, v| {
            let y = t.index_select(v[0], vec![2, 0, 2, 1])?;
            weighted_sum(t, y, 9)
        })),
        ("reshape", vec![&[2, 6]], Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted_sum(t, y, 10)
        })),
        ("relu", vec![&[8]], Box::new(|t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 11)
        })),
        ("tanh", vec![&[8]], Box::new(|t, v| {
            let y = t.tanh(v[0])?;
            weighted_sum(t, y, 12)
        })),
        ("l2_normalize", vec![&[3, 4]], Box::new(|t, v| {
            let y = t.l2_normalize(v[0])?;
            weighted_sum(t, y, 13)
        })),
        ("scale", vec![&[5]], Box::new(|t, v| {
            let y = t.scale(v[0], -2.5)?;
            weighted_sum(t, y, 14)
        })),
        ("softmax_rows", vec![&[3, 4]], Box::new(|t, v| {
            let y = t.softmax_rows(v[0])?;
            weighted_sum(t, y, 15)
        })),
        ("softmax_ce", vec![&[4, 3]], Box::new(|t, v| t.softmax_ce(v[0], vec![0, 2, 1, 2]))),
        ("composite", vec![&[3, 4], &[4, 4], &[4]], Box::new(|t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.tanh(h)?;
            let h = t.l2_normalize(h)?;
            let h = t.scale(h, 3.0)?;
            t.softmax_ce(h, vec![1, 0, 3])
        })),
    ];
    for (name, shapes, program) in cases {
        check(name, &shapes, program);
    }
}

#[test]
fn record_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let s = t.record(Primitive::Add, &[a, b]).unwrap();
    assert_eq!(t.value(s).data(), &[4.0, 6.0]);

    let z = t.constant(Tensor::zeros(&[2, 3]));
    let any = t.constant(Tensor::normal(&[3, 1], 1.0, &mut rng(1)));
    let m = t.matmul(z, any).unwrap();
    assert_eq!(t.value(m), &Tensor::zeros(&[2, 1]));

    let c = t.concat(&[a, b], 0).unwrap();
    assert_eq!(t.shape(c), &[4]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![1.0, 1.0]));
    let y = t.scale(x, 2.0).unwrap();
    let y = t.mean_all(y).unwrap();
    let loss = t.scale(y, 2.0).unwrap(); // sum of 2x over two entries
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![3.0]));
    let sq = t.mul(x, x).unwrap();
    let loss = t.mean_all(sq).unwrap();
    assert_eq!(t.backward(loss).unwrap().get(x).unwrap().data(), &[6.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Usage(_))));
}

#[test]
fn backward_is_bitwise_repeatable_and_skips_constants() {
    let build = || {
        let mut t = Tape::new();
        let w = t.param(Tensor::normal(&[4, 3], 1.0, &mut rng(3)));
        let frozen = t.constant(Tensor::normal(&[5, 4], 1.0, &mut rng(4)));
        let h = t.matmul(frozen, w).unwrap();
        let h = t.tanh(h).unwrap();
        let loss = t.softmax_ce(h, vec![0, 1, 2, 0, 1]).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(frozen).is_none());
        assert_eq!(g.len(), 1);
        g.get(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}

#[test]
fn finite_diff_check_contract() {
    let linear = |t: &mut Tape, v: &[Var]| {
        let y = t.scale(v[0], 1.75)?;
        t.mean_all(y)
    };
    let p = vec![Tensor::normal(&[6], 1.0, &mut rng(5))];
    assert!(finite_diff_check(linear, &p, 1e-4).unwrap().max_rel_error <= 1e-10);
    assert!(matches!(finite_diff_check(linear, &p, 0.0), Err(Error::Numeric(_))));

    let blowup = |t: &mut Tape, v: &[Var]| {
        let y = t.scale(v[0], f64::INFINITY)?;
        t.mean_all(y)
    };
    assert!(matches!(finite_diff_check(blowup, &p, 1e-4), Err(Error::Numeric(_))));
}
