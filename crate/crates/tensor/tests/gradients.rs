use mfkd_tensor::gradcheck::check;
use mfkd_tensor::{naive_conv2d, Graph, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values kept away from zero so ReLU / max kinks are never crossed by ±h.
fn rand_offzero(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random projection so every output element contributes a distinct weight.
fn project(g: &mut Graph, y: mfkd_tensor::Var, seed: u64) -> mfkd_tensor::Result<mfkd_tensor::Var> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn assert_check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[mfkd_tensor::Var]) -> mfkd_tensor::Result<mfkd_tensor::Var>,
{
    let report = check(inputs, H, f).unwrap();
    assert!(report.passed(TOL), "{name}: rel err {:?}", report.rel_errors);
}

#[test]
fn elementwise_and_linear_ops() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    assert_check("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 10)
    });
    assert_check("sub", &[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 11)
    });
    assert_check("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 12)
    });
    assert_check("scale", std::slice::from_ref(&a), |g, v| {
        let y = g.scale(v[0], -2.5);
        project(g, y, 13)
    });
    let c = rand_tensor(&mut rng, &[4, 5]);
    assert_check("matmul", &[a.clone(), c], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 14)
    });
    assert_check("transpose", std::slice::from_ref(&a), |g, v| {
        let y = g.transpose(v[0])?;
        project(g, y, 15)
    });
    assert_check("reshape", std::slice::from_ref(&a), |g, v| {
        let y = g.reshape(v[0], &[2, 6])?;
        project(g, y, 16)
    });
    let bias = rand_tensor(&mut rng, &[4]);
    assert_check("add_row_bias", &[a.clone(), bias], |g, v| {
        let y = g.add_row_bias(v[0], v[1])?;
        project(g, y, 17)
    });
    assert_check("sum", std::slice::from_ref(&a), |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum(y))
    });
    assert_check("mean", std::slice::from_ref(&a), |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.mean(y))
    });
    assert_check("exp", std::slice::from_ref(&a), |g, v| {
        let y = g.exp(v[0]);
        project(g, y, 18)
    });
    assert_check("sigmoid", &[a], |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 19)
    });
    let r = rand_offzero(&mut rng, &[3, 4]);
    assert_check("relu", &[r], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 20)
    });
}

#[test]
fn structural_ops() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 2, 4]);
    for axis in 0..3 {
        assert_check("softmax", std::slice::from_ref(&a), move |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, 30 + axis as u64)
        });
    }
    assert_check("concat", &[a.clone(), b], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        project(g, y, 40)
    });
    assert_check("slice", std::slice::from_ref(&a), |g, v| {
        let y = g.slice(v[0], 2, 1, 2)?;
        project(g, y, 41)
    });
    let cb = rand_tensor(&mut rng, &[2]);
    assert_check("add_channel_bias", &[a.clone(), cb], |g, v| {
        let y = g.add_channel_bias(v[0], v[1])?;
        project(g, y, 42)
    });
    let w = rand_tensor(&mut rng, &[1, 3, 4]);
    assert_check("mul_broadcast", &[a.clone(), w], |g, v| {
        let y = g.mul_broadcast(v[0], v[1])?;
        project(g, y, 43)
    });
    assert_check("bilinear_upsample", std::slice::from_ref(&a), |g, v| {
        let y = g.bilinear_upsample(v[0], 6, 8)?;
        project(g, y, 44)
    });
    assert_check("bilinear_upsample x4", std::slice::from_ref(&a), |g, v| {
        let y = g.bilinear_upsample(v[0], 12, 16)?;
        project(g, y, 45)
    });
    let col = rand_tensor(&mut rng, &[5, 1]);
    assert_check("pairwise_diff", &[col], |g, v| {
        let y = g.pairwise_diff(v[0])?;
        project(g, y, 46)
    });
    let rows = rand_tensor(&mut rng, &[4, 3]);
    assert_check("aggregate_rows", std::slice::from_ref(&rows), |g, v| {
        let y = g.aggregate_rows(v[0], vec![vec![(0, 0.5), (3, 0.5)], vec![], vec![(2, 1.0), (2, 2.0)]])?;
        project(g, y, 47)
    });
    assert_check("gather_cells", std::slice::from_ref(&a), |g, v| {
        let y = g.gather_cells(v[0], &[0, 5, 11, 5])?;
        project(g, y, 48)
    });
    // distinct values per cell so the max is unique and stable under ±h
    let feats = Tensor::new(vec![4, 2], vec![0.3, -0.9, 0.8, -0.1, -0.5, 0.6, 0.2, 0.4]).unwrap();
    assert_check("scatter_max", &[feats], |g, v| {
        let y = g.scatter_max(v[0], &[1, 1, 3, 1], 2, 2)?;
        project(g, y, 49)
    });
}

#[test]
fn convolution_ops() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 5, 6]);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let w = rand_tensor(&mut rng, &[3, 2, k, k]);
        assert_check("conv2d", &[x.clone(), w], move |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            project(g, y, 50)
        });
    }
    let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    assert_check("deconv2d", &[x.clone(), w], |g, v| {
        let y = g.deconv2d(v[0], v[1], 2, 1, 1)?;
        assert_eq!(g.shape(y), &[3, 10, 12]);
        project(g, y, 51)
    });
}

#[test]
fn loss_ops() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    assert_check("mse_loss", &[a.clone(), b.clone()], |g, v| g.mse_loss(v[0], v[1]));
    // differences straddle both smooth-L1 branches; beta keeps kinks away
    let big = a.map(|v| 3.0 * v);
    assert_check("smooth_l1_loss", &[big.clone(), b.clone()], |g, v| {
        g.smooth_l1_loss(v[0], v[1], 1.0)
    });
    assert_check("smooth_l1 elementwise", &[big, b], |g, v| {
        let y = g.smooth_l1(v[0], v[1], 0.7)?;
        project(g, y, 60)
    });
    let logits = rand_tensor(&mut rng, &[2, 4, 4]).map(|v| 2.0 * v);
    let mut target = Tensor::zeros(&[2, 4, 4]);
    for (i, t) in target.data_mut().iter_mut().enumerate() {
        *t = ((i * 7) % 10) as f64 / 10.0;
    }
    target.data_mut()[5] = 1.0;
    target.data_mut()[20] = 1.0;
    assert_check("focal_loss", &[logits], move |g, v| g.focal_loss(v[0], &target));
}

#[test]
fn composite_attention_ffn_graph() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[5, 4]);
    let wq = rand_tensor(&mut rng, &[4, 4]);
    let wk = rand_tensor(&mut rng, &[4, 4]);
    let wv = rand_tensor(&mut rng, &[4, 4]);
    let w1 = rand_tensor(&mut rng, &[4, 6]);
    let w2 = rand_tensor(&mut rng, &[6, 4]);
    let target = rand_tensor(&mut rng, &[5, 4]);
    assert_check("attention+ffn", &[x, wq, wk, wv, w1, w2], move |g, v| {
        let q = g.matmul(v[0], v[1])?;
        let k = g.matmul(v[0], v[2])?;
        let val = g.matmul(v[0], v[3])?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 0.5);
        let att = g.softmax(logits, 1)?;
        let mixed = g.matmul(att, val)?;
        let res = g.add(mixed, v[0])?;
        let h1 = g.matmul(res, v[4])?;
        let h1 = g.sigmoid(h1);
        let h2 = g.matmul(h1, v[5])?;
        let out = g.add(h2, res)?;
        let t = g.constant(target.clone());
        g.mse_loss(out, t)
    });
}

#[test]
fn conv_matches_naive_loops_exactly() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)] {
        let x = rand_tensor(&mut rng, &[3, 7, 9]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let expected = naive_conv2d(x.data(), 3, 7, 9, w.data(), 4, k, stride, pad);
        assert_eq!(g.value(y).data(), expected.as_slice(), "k={k} s={stride} p={pad}");
    }
}

#[test]
fn deconv_is_adjoint_of_strided_conv() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
    let small = rand_tensor(&mut rng, &[3, 4, 5]);
    let big = rand_tensor(&mut rng, &[2, 8, 10]);
    // deconv weight [cin=3, cout=2, 3, 3]; the matching conv weight is [3, 2, 3, 3] as [cout', cin']
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let mut g = Graph::new();
    let s = g.constant(small.clone());
    let b = g.constant(big.clone());
    let wv = g.constant(w);
    let up = g.deconv2d(s, wv, 2, 1, 1).unwrap();
    let down = g.conv2d(b, wv, 2, 1).unwrap();
    let lhs: f64 = g.value(up).data().iter().zip(big.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(down).data().iter().zip(small.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn named_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let a = g.constant(Tensor::scalar(0.5));
    let z = g.constant(Tensor::scalar(0.0));
    let l = g.smooth_l1_loss(a, z, 1.0).unwrap();
    assert_eq!(g.value(l).item(), 0.125);
}

#[test]
fn backward_contracts() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    assert_eq!(g.backward(loss).unwrap_err(), TensorError::BackwardTwice);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![0.3, -1.2, 4.0]));
    let loss = g.mse_loss(x, x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0; 3]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(g.add(a, b).is_err());
    let img = g.constant(Tensor::zeros(&[3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(g.conv2d(img, w, 1, 1).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
