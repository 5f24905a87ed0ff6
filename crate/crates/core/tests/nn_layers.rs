use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scout_core::autodiff::gradcheck::{all_entries, check_inputs, check_params};
use scout_core::autodiff::{Bound, ParameterSet, Tape, Tensor, Var};
use scout_core::nn::{Backbone, DescriptorHead, GruCell, Init, LayerNorm, Linear, Mlp2, RunningNormalizer};

type R<T> = scout_core::autodiff::Result<T>;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Replace every parameter with fresh random values so zero biases and unit
/// gains do not hide errors.
fn randomize(params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in names {
        for x in params.get_mut(&n).unwrap().data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
}

fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> R<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = tape.shape(v).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, s[0], s[1]));
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn assert_params<F>(name: &str, params: &ParameterSet, f: F)
where
    F: Fn(&mut Tape, &Bound) -> R<Var>,
{
    let rep = check_params(params, f, &all_entries(params), 1e-5).unwrap();
    assert!(rep.passes(1e-4, 1e-6), "{name}: {rep:?}");
}

#[test]
fn gru_sum_of_hidden_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParameterSet::new();
    let gru = GruCell::new(&mut params, "gru", 6, 4, Init::Orthogonal(1.0), &mut rng).unwrap();
    randomize(&mut params, &mut rng);
    let x = rand_tensor(&mut rng, 3, 6);
    let h = rand_tensor(&mut rng, 3, 4).reshaped(vec![3, 4]).unwrap();
    let h = Tensor::matrix(3, 4, h.data().iter().map(|v| v * 0.4).collect()).unwrap();
    assert_params("gru", &params, |t, p| {
        let xv = t.constant(x.clone());
        let hv = t.constant(h.clone());
        let out = gru.forward(t, p, xv, hv)?;
        t.sum(out)
    });
    let rep = check_inputs(
        |t, v| {
            let p = params.bind_frozen(t);
            let out = gru.forward(t, &p, v[0], v[1])?;
            weighted_sum(t, out, 3)
        },
        &[x, h],
        1e-5,
    )
    .unwrap();
    assert!(rep.passes(1e-4, 1e-6), "{rep:?}");
}

#[test]
fn linear_layer_norm_and_descriptor_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParameterSet::new();
    let lin = Linear::new(&mut params, "lin", 5, 4, Init::Orthogonal(1.0), &mut rng).unwrap();
    let ln = LayerNorm::new(&mut params, "ln", 4).unwrap();
    let desc = DescriptorHead::new(&mut params, "desc", 4, 6, 3, Init::Orthogonal(1.0), &mut rng).unwrap();
    randomize(&mut params, &mut rng);
    let x = rand_tensor(&mut rng, 3, 5);
    assert_params("linear", &params, |t, p| {
        let xv = t.constant(x.clone());
        let y = lin.forward(t, p, xv)?;
        weighted_sum(t, y, 1)
    });
    assert_params("layer_norm", &params, |t, p| {
        let xv = t.constant(x.clone());
        let y = lin.forward(t, p, xv)?;
        let y = ln.forward(t, p, y)?;
        weighted_sum(t, y, 2)
    });
    assert_params("descriptor", &params, |t, p| {
        let xv = t.constant(x.clone());
        let y = lin.forward(t, p, xv)?;
        let y = desc.forward(t, p, y)?;
        weighted_sum(t, y, 3)
    });
}

#[test]
fn split_mlp_and_backbone_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParameterSet::new();
    let mlp = Mlp2::new(&mut params, "mlp", &[("a", 3), ("b", 2)], 5, 2, Init::Orthogonal(1.0), &mut rng).unwrap();
    let bb = Backbone::new(&mut params, "bb", 4, 3, 5, 4, Init::Orthogonal(1.0), &mut rng).unwrap();
    randomize(&mut params, &mut rng);
    let a = rand_tensor(&mut rng, 4, 3);
    let b = rand_tensor(&mut rng, 4, 2);
    assert_params("mlp", &params, |t, p| {
        let av = t.constant(a.clone());
        let bv = t.constant(b.clone());
        let y = mlp.forward(t, p, &[av, bv])?;
        weighted_sum(t, y, 4)
    });
    let obs = rand_tensor(&mut rng, 2, 4);
    let mb = rand_tensor(&mut rng, 2, 3);
    let h0 = Tensor::zeros(&[2, 4]);
    assert_params("backbone", &params, |t, p| {
        let o = t.constant(obs.clone());
        let m = t.constant(mb.clone());
        let h = t.constant(h0.clone());
        let h1 = bb.embed_and_step(t, p, o, m, h)?;
        let h2 = bb.embed_and_step(t, p, o, m, h1)?;
        weighted_sum(t, h2, 5)
    });
}

#[test]
fn split_layer_equals_single_matrix_on_concatenated_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ParameterSet::new();
    let mlp = Mlp2::new(&mut params, "m", &[("a", 3), ("b", 2)], 4, 1, Init::Orthogonal(1.0), &mut rng).unwrap();
    randomize(&mut params, &mut rng);
    let a = rand_tensor(&mut rng, 2, 3);
    let b = rand_tensor(&mut rng, 2, 2);
    let mut t = Tape::new();
    let p = params.bind_frozen(&mut t);
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let y = mlp.forward(&mut t, &p, &[av, bv]).unwrap();
    let got = t.value(y).data().to_vec();

    // Oracle: stack the block weights and run plain loops.
    let wa = params.get("m.l1.w_a").unwrap();
    let wb = params.get("m.l1.w_b").unwrap();
    let b1 = params.get("m.l1.b").unwrap();
    let w2 = params.get("m.l2.w").unwrap();
    let b2 = params.get("m.l2.b").unwrap();
    let w3 = params.get("m.l3.w").unwrap();
    let b3 = params.get("m.l3.b").unwrap();
    let dense = |x: &[f64], w: &Tensor, bias: &Tensor, relu: bool| -> Vec<f64> {
        let (r, c) = w.rows_cols();
        (0..c)
            .map(|j| {
                let s = (0..r).map(|i| x[i] * w.data()[i * c + j]).sum::<f64>() + bias.data()[j];
                if relu { s.max(0.0) } else { s }
            })
            .collect()
    };
    for row in 0..2 {
        let mut pre = vec![0.0; 4];
        let (wa_r, wb_r) = (wa.rows_cols().1, wb.rows_cols().1);
        for j in 0..4 {
            pre[j] = (0..3).map(|i| a.row(row)[i] * wa.data()[i * wa_r + j]).sum::<f64>()
                + (0..2).map(|i| b.row(row)[i] * wb.data()[i * wb_r + j]).sum::<f64>()
                + b1.data()[j];
        }
        let h1: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let h2 = dense(&h1, w2, b2, true);
        let out = dense(&h2, w3, b3, false);
        assert!((out[0] - got[row]).abs() < 1e-12);
    }
}

#[test]
fn swapping_identical_inputs_with_their_weight_rows_is_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParameterSet::new();
    let mlp = Mlp2::new(&mut params, "m", &[("x", 4)], 6, 1, Init::Orthogonal(1.0), &mut rng).unwrap();
    randomize(&mut params, &mut rng);
    let mut x = rand_tensor(&mut rng, 1, 4);
    let v = x.data()[0];
    x.data_mut()[2] = v;
    let run = |params: &ParameterSet, x: &Tensor| {
        let mut t = Tape::new();
        let p = params.bind_frozen(&mut t);
        let xv = t.constant(x.clone());
        let y = mlp.forward(&mut t, &p, &[xv]).unwrap();
        t.value(y).item()
    };
    let before = run(&params, &x);
    let mut swapped = params.clone();
    let w = swapped.get_mut("m.l1.w_x").unwrap();
    let cols = w.rows_cols().1;
    for j in 0..cols {
        w.data_mut().swap(j, 2 * cols + j);
    }
    assert!((run(&swapped, &x) - before).abs() < 1e-12);
}

proptest! {
    #[test]
    fn gru_state_stays_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let gru = GruCell::new(&mut params, "g", 5, 6, Init::Orthogonal(1.0), &mut rng).unwrap();
        let mut t = Tape::new();
        let p = params.bind_frozen(&mut t);
        let mut h = t.constant(Tensor::zeros(&[2, 6]));
        for _ in 0..5 {
            let raw = rand_tensor(&mut rng, 2, 5);
            let x = t.constant(Tensor::matrix(2, 5, raw.data().iter().map(|v| v * scale).collect()).unwrap());
            h = gru.forward(&mut t, &p, x, h).unwrap();
            // Saturated tanh rounds to exactly 1 in f64, so the bound is closed here.
            prop_assert!(t.value(h).data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn normalizer_matches_batch_statistics(xs in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 1..60)) {
        let mut norm = RunningNormalizer::new(3);
        for x in &xs {
            norm.update(x);
        }
        let n = xs.len() as f64;
        for d in 0..3 {
            let mean = xs.iter().map(|x| x[d]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((norm.mean()[d] - mean).abs() < 1e-9);
            prop_assert!((norm.variance()[d] - var).abs() < 1e-9 * var.max(1.0) * 10.0);
        }
    }
}
