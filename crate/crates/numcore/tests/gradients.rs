//! Finite-difference checks for every differentiable op.

use numcore::gradcheck::check_gradients;
use numcore::{ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn store(shapes: &[&[usize]], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, sh)| s.add(format!("p{i}"), Tensor::randn(sh, 1.0, &mut rng).with_requires_grad(true)).unwrap())
        .collect();
    (s, ids)
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe<'t>(tape: &mut Tape<'t>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let shape = tape.shape(y).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect())?;
    let w = tape.constant(w);
    let m = tape.mul(y, w)?;
    tape.sum(m)
}

fn assert_check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: for<'t> Fn(&mut Tape<'t>, &'t ParamStore, &[ParamId]) -> Result<Var>,
{
    let (mut s, ids) = store(shapes, 11);
    let ids2 = ids.clone();
    let report = check_gradients(&mut s, &ids, STEP, 1e-6, |tape, st| f(tape, st, &ids2)).unwrap();
    assert!(report.max_rel_error < TOL, "{name}: {:?}", report);
}

#[test]
fn matmul_grad() {
    assert_check("matmul", &[&[3, 4], &[4, 5]], |t, s, ids| {
        let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        let y = t.matmul(a, b)?;
        probe(t, y)
    });
}

#[test]
fn add_and_add_row_grad() {
    assert_check("add", &[&[3, 4], &[3, 4], &[4]], |t, s, ids| {
        let (a, b, c) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
        let y = t.add(a, b)?;
        let y = t.add_row(y, c)?;
        probe(t, y)
    });
}

#[test]
fn mul_and_scale_grad() {
    assert_check("mul", &[&[2, 5], &[2, 5]], |t, s, ids| {
        let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        let y = t.mul(a, b)?;
        let y = t.scale(y, -1.7)?;
        probe(t, y)
    });
}

#[test]
fn relu_grad() {
    assert_check("relu", &[&[4, 6]], |t, s, ids| {
        let x = t.param(s, ids[0]);
        let y = t.relu(x)?;
        probe(t, y)
    });
}

#[test]
fn gelu_grad() {
    assert_check("gelu", &[&[4, 6]], |t, s, ids| {
        let x = t.param(s, ids[0]);
        let y = t.gelu(x)?;
        probe(t, y)
    });
}

#[test]
fn softmax_grad() {
    assert_check("softmax", &[&[3, 5]], |t, s, ids| {
        let x = t.param(s, ids[0]);
        let y = t.softmax(x)?;
        probe(t, y)
    });
}

#[test]
fn layer_norm_grad() {
    assert_check("layer_norm", &[&[3, 6], &[6], &[6]], |t, s, ids| {
        let (x, g, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
        let y = t.layer_norm(x, g, b)?;
        probe(t, y)
    });
}

#[test]
fn gather_grad_with_repeats() {
    assert_check("gather", &[&[5, 3]], |t, s, ids| {
        let x = t.param(s, ids[0]);
        let y = t.gather(x, &[4, 0, 4, 2])?;
        probe(t, y)
    });
}

#[test]
fn cross_entropy_grad() {
    assert_check("cross_entropy", &[&[4, 6]], |t, s, ids| {
        let x = t.param(s, ids[0]);
        t.cross_entropy(x, &[0, 5, 2, 2])
    });
}

#[test]
fn concat_reshape_slice_grad() {
    assert_check("concat/reshape/slice", &[&[2, 3], &[2, 2]], |t, s, ids| {
        let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        let c = t.concat(&[a, b])?;
        let r = t.reshape(c, &[1, 10])?;
        let sl = t.slice(r, 3, &[2, 3])?;
        probe(t, sl)
    });
}

#[test]
fn mean_grad() {
    assert_check("mean", &[&[3, 3]], |t, s, ids| {
        let x = t.param(s, ids[0]);
        let y = t.mul(x, x)?;
        t.mean(y)
    });
}

#[test]
fn dropout_grad_with_fixed_mask() {
    assert_check("dropout", &[&[4, 4]], |t, s, ids| {
        let x = t.param(s, ids[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = t.dropout(x, 0.3, &mut rng)?;
        probe(t, y)
    });
}

#[test]
fn attention_grad_with_padding() {
    // batch 2, seq 3, hidden 4, 2 heads; last key of the second sequence is padding
    assert_check("attention", &[&[6, 4], &[6, 4], &[6, 4]], |t, s, ids| {
        let (q, k, v) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
        let y = t.attention(q, k, v, 2, 3, 2, &[true, true, true, true, true, false])?;
        probe(t, y)
    });
}

#[test]
fn two_layer_relu_network() {
    assert_check("mlp", &[&[5, 4], &[4, 6], &[6], &[6, 3], &[3]], |t, s, ids| {
        let x = t.param(s, ids[0]);
        let (w1, b1, w2, b2) = (t.param(s, ids[1]), t.param(s, ids[2]), t.param(s, ids[3]), t.param(s, ids[4]));
        let h = t.matmul(x, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.relu(h)?;
        let o = t.matmul(h, w2)?;
        let o = t.add_row(o, b2)?;
        t.cross_entropy(o, &[0, 1, 2, 1, 0])
    });
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let (mut s, ids) = store(&[&[3]], 5);
    for _ in 0..2 {
        let g = {
            let mut t = Tape::new();
            let p = t.param(&s, ids[0]);
            let l = t.sum(p).unwrap();
            t.backward(l).unwrap()
        };
        s.accumulate(&g).unwrap();
    }
    assert_eq!(s.get(ids[0]).grad().unwrap(), &[2.0, 2.0, 2.0]);
    s.zero_grad();
    assert_eq!(s.get(ids[0]).grad().unwrap(), &[0.0, 0.0, 0.0]);
}
