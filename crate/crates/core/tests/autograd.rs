use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcom3d::nn::{Tape, Tensor, Var};

/// Compares tape gradients of `f` w.r.t. every input against central differences.
fn gradcheck(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss);
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let eval = |delta: f64| {
                let mut shifted = inputs.clone();
                shifted[k].data[j] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = shifted.iter().map(|x| t.leaf(x.clone())).collect();
                let l = f(&mut t, &vs);
                t.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - analytic[j]).abs();
            let scale = numeric.abs().max(analytic[j].abs()).max(1e-3);
            assert!(
                err / scale < 1e-5,
                "input {k} element {j}: analytic {} numeric {numeric}",
                analytic[j]
            );
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    // Random projection so every output element gets a distinct upstream gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.leaf(rand_tensor(&mut rng, &shape));
    let p = tape.mul(x, w);
    tape.sum(p)
}

#[test]
fn matmul_all_transpose_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand_tensor(&mut rng, &[4, 3]) } else { rand_tensor(&mut rng, &[3, 4]) };
        let b = if tb { rand_tensor(&mut rng, &[2, 4]) } else { rand_tensor(&mut rng, &[4, 2]) };
        gradcheck(vec![a, b], |t, v| {
            let y = t.matmul_t(v[0], ta, v[1], tb);
            weighted_sum(t, y, 7)
        });
    }
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let y = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let col = rand_tensor(&mut rng, &[3]);
    let s = rand_tensor(&mut rng, &[1]);
    gradcheck(vec![x.clone(), y.clone(), row.clone(), col.clone(), s.clone()], |t, v| {
        let a = t.add(v[0], v[1]);
        let b = t.sub(a, v[1]);
        let c = t.mul(b, v[1]);
        let d = t.add_bias(c, v[2]);
        let e = t.mul_row(d, v[2]);
        let f = t.mul_col(e, v[3]);
        let g = t.scale_by(f, v[4]);
        let h = t.scale(g, 1.7);
        let i = t.add_scalar(h, 0.3);
        weighted_sum(t, i, 3)
    });
    let pos = Tensor::new(vec![3, 4], x.data.iter().map(|v| v.abs() + 0.5).collect());
    gradcheck(vec![y, pos], |t, v| {
        let d = t.div(v[0], v[1]);
        let s = t.sqrt(v[1]);
        let e = t.add(d, s);
        weighted_sum(t, e, 4)
    });
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Keep away from the kinks of relu/abs.
    let x = Tensor::new(
        vec![2, 5],
        (0..10).map(|_| {
            let v: f64 = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) { v } else { -v }
        }).collect(),
    );
    type Act = fn(&mut Tape<f64>, Var) -> Var;
    let acts: Vec<Act> = vec![
        |t, x| t.relu(x),
        |t, x| t.leaky_relu(x, 0.2),
        |t, x| t.sigmoid(x),
        |t, x| t.tanh(x),
        |t, x| t.softplus(x),
        |t, x| t.gelu(x),
        |t, x| t.exp(x),
        |t, x| t.abs(x),
        |t, x| t.square(x),
    ];
    for act in acts {
        gradcheck(vec![x.clone()], |t, v| {
            let y = act(t, v[0]);
            weighted_sum(t, y, 5)
        });
    }
}

#[test]
fn normalisations_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 5]);
    gradcheck(vec![x.clone()], |t, v| {
        let y = t.softmax_rows(v[0]);
        weighted_sum(t, y, 6)
    });
    gradcheck(vec![x.clone()], |t, v| {
        let y = t.log_softmax_all(v[0]);
        weighted_sum(t, y, 8)
    });
    gradcheck(vec![x.clone()], |t, v| {
        let y = t.layer_norm(v[0], 1e-5);
        weighted_sum(t, y, 9)
    });
    gradcheck(vec![x.clone(), rand_tensor(&mut rng, &[3, 5])], |t, v| {
        let m = t.mse(v[0], v[1]);
        let s = t.sum(v[0]);
        let k = t.mean(v[1]);
        let a = t.add(m, s);
        t.add(a, k)
    });
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 6]);
    let y = rand_tensor(&mut rng, &[3, 2]);
    gradcheck(vec![x, y], |t, v| {
        let a = t.slice_cols(v[0], 1, 3);
        let b = t.concat_cols(&[a, v[1], a]);
        let c = t.transpose(b);
        let d = t.reshape(c, &[4, 6]);
        weighted_sum(t, d, 10)
    });
}

#[test]
fn row_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let y = rand_tensor(&mut rng, &[2, 3]);
    gradcheck(vec![x, y], |t, v| {
        let a = t.slice_rows(v[0], 1, 3);
        let b = t.slice_rows(v[0], 4, 1);
        let c = t.concat_rows(&[b, v[1], a, a]);
        let d = t.square(c);
        weighted_sum(t, d, 11)
    });
}

#[test]
fn straight_through_routes_gradient_to_soft_branch() {
    let mut tape = Tape::new();
    let soft = tape.leaf(Tensor::new(vec![3], vec![0.2, 0.7, 0.4]));
    let hard = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]);
    let st = tape.straight_through(hard.clone(), soft);
    assert_eq!(tape.value(st), &hard);
    let w = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
    let p = tape.mul(st, w);
    let l = tape.sum(p);
    let g = tape.backward(l);
    assert_eq!(g.wrt(soft).unwrap(), &[1.0, 2.0, 3.0]);
}

#[test]
fn convolution_upsample_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        gradcheck(vec![x.clone(), w.clone(), b.clone()], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad);
            weighted_sum(t, y, 11)
        });
    }
    let z = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let q = rand_tensor(&mut rng, &[2, 2, 6, 6]);
    gradcheck(vec![z, q], |t, v| {
        let u = t.upsample2x(v[0]);
        let c = t.concat_channels(&[u, v[1]]);
        weighted_sum(t, c, 12)
    });
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let w = rand_tensor(&mut rng, &[1, 2, 3, 3]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
    let bv = tape.leaf(Tensor::new(vec![1], vec![0.5]));
    let y = tape.conv2d(xv, wv, bv, 1, 1);
    for i in 0..4usize {
        for j in 0..4usize {
            let mut acc = 0.5;
            for c in 0..2 {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let (ii, jj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                        if (0..4).contains(&ii) && (0..4).contains(&jj) {
                            acc += x.data[c * 16 + ii as usize * 4 + jj as usize] * w.data[c * 9 + ki * 3 + kj];
                        }
                    }
                }
            }
            assert!((tape.data(y)[i * 4 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn volume_compositing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rays = 3;
    let samples = 5;
    let density = Tensor::new(vec![rays * samples], (0..rays * samples).map(|_| rng.gen_range(0.0..3.0)).collect());
    let rgb = Tensor::new(vec![rays * samples, 3], (0..rays * samples * 3).map(|_| rng.gen_range(0.0..1.0)).collect());
    let deltas: Vec<f64> = (0..rays * samples).map(|_| rng.gen_range(0.05..0.4)).collect();
    gradcheck(vec![density, rgb], |t, v| {
        let c = t.composite(v[0], v[1], deltas.clone(), [0.2, 0.5, 0.9], samples);
        weighted_sum(t, c, 13)
    });
}
