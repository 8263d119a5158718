use agglo_core::numerics::{grad_check, suite_cases, GradOp, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn eval(op: GradOp, inputs: Vec<Tensor<f64>>) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.into_iter().map(|t| g.constant(t)).collect();
    let out = op.apply(&mut g, &vars).unwrap();
    g.value(out).clone()
}

#[test]
fn matmul_examples() {
    let eye = t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    let a = t64(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
    assert_eq!(eval(GradOp::Matmul, vec![eye, a.clone()]), a);

    let out = eval(GradOp::Matmul, vec![t64(&[2, 2], &[1., 2., 3., 4.]), t64(&[2, 1], &[1., 1.])]);
    assert_eq!(out, t64(&[2, 1], &[3., 7.]));

    let k = 7;
    let out = eval(GradOp::Matmul, vec![Tensor::full([1, k], 1.0), Tensor::full([k, 1], 1.0)]);
    assert_eq!(out.data(), &[k as f64]);

    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::uniform([1, 1, 4, 5], -1.0, 1.0, &mut rng);
    let id = eval(GradOp::Conv2d { stride: 1, pad: 0, bias: false }, vec![x.clone(), Tensor::full([1, 1, 1, 1], 1.0)]);
    assert_eq!(id, x);

    let big = Tensor::<f64>::zeros([1, 3, 224, 224]);
    let out = eval(GradOp::Conv2d { stride: 2, pad: 1, bias: false }, vec![big, Tensor::zeros([4, 3, 3, 3])]);
    assert_eq!(out.shape(), &[1, 4, 112, 112]);

    let out = eval(
        GradOp::Conv2d { stride: 1, pad: 0, bias: false },
        vec![t64(&[1, 1, 2, 2], &[1., 2., 3., 4.]), Tensor::full([1, 1, 2, 2], 1.0)],
    );
    assert_eq!(out.data(), &[10.0]);

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 1, 2, 2]));
    let w = g.constant(Tensor::zeros([1, 1, 5, 5]));
    assert!(g.conv2d(x, w, None, 1, 0).is_err());
    let w = g.constant(Tensor::zeros([1, 1, 1, 1]));
    assert!(g.conv2d(x, w, None, 0, 0).is_err());
}

#[test]
fn transposed_conv_examples() {
    let x = Tensor::<f64>::zeros([1, 2, 7, 7]);
    let w = Tensor::<f64>::zeros([2, 2, 3, 3]);
    let plain = eval(GradOp::ConvTranspose2d { stride: 2, pad: 1, output_padding: 0, bias: false }, vec![x.clone(), w.clone()]);
    assert_eq!(plain.shape(), &[1, 2, 13, 13]);
    let doubled = eval(GradOp::ConvTranspose2d { stride: 2, pad: 1, output_padding: 1, bias: false }, vec![x, w]);
    assert_eq!(doubled.shape(), &[1, 2, 14, 14]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::uniform([1, 1, 3, 4], -1.0, 1.0, &mut rng);
    let id = eval(
        GradOp::ConvTranspose2d { stride: 1, pad: 0, output_padding: 0, bias: false },
        vec![x.clone(), Tensor::full([1, 1, 1, 1], 1.0)],
    );
    assert_eq!(id, x);
}

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.dot(b)
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cases = [(1usize, 1usize, 4usize, 3usize, 1usize, 0usize), (2, 3, 6, 3, 2, 1), (3, 2, 7, 3, 2, 1), (2, 2, 5, 1, 1, 0)];
        for &(ci, co, side, k, stride, pad) in &cases {
            let x = Tensor::<f64>::uniform([1, ci, side, side], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::uniform([co, ci, k, k], -1.0, 1.0, &mut rng);
            let cx = eval(GradOp::Conv2d { stride, pad, bias: false }, vec![x.clone(), w.clone()]);
            let y = Tensor::<f64>::uniform(cx.shape().to_vec(), -1.0, 1.0, &mut rng);
            // conv output side may lose a remainder row; output_padding restores it.
            let out_pad = (side + 2 * pad - k) % stride;
            let ty = eval(GradOp::ConvTranspose2d { stride, pad, output_padding: out_pad, bias: false }, vec![y.clone(), w]);
            assert_eq!(ty.shape(), x.shape());
            let (l, r) = (inner(&cx, &y), inner(&x, &ty));
            assert!((l - r).abs() < 1e-10, "seed {seed}: {l} vs {r}");
        }
    }
}

#[test]
fn bilinear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::uniform([1, 2, 5, 3], -1.0, 1.0, &mut rng);
    let same = eval(GradOp::BilinearResize { out_h: 5, out_w: 3 }, vec![x.clone()]);
    assert_eq!(same, x, "identity resize must be bitwise exact");

    let c = Tensor::<f64>::full([1, 1, 3, 4], 0.37);
    for (h, w) in [(1, 1), (7, 2), (3, 9)] {
        let out = eval(GradOp::BilinearResize { out_h: h, out_w: w }, vec![c.clone()]);
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    let out = eval(GradOp::BilinearResize { out_h: 1, out_w: 1 }, vec![t64(&[1, 1, 2, 2], &[1., 2., 3., 4.])]);
    assert_eq!(out.data(), &[2.5]);

    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::zeros([1, 1, 0, 2]));
    assert!(g.bilinear_resize(e, 2, 2).is_err());
}

#[test]
fn layer_norm_examples() {
    let eps = 1e-5;
    let ones = Tensor::<f64>::full([8], 1.0);
    let zeros = Tensor::<f64>::zeros([8]);
    let out = eval(GradOp::LayerNorm { eps }, vec![Tensor::full([1, 8], 3.0), ones.clone(), zeros.clone()]);
    assert!(out.data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::uniform([4, 16], -3.0, 5.0, &mut rng);
    let out = eval(GradOp::LayerNorm { eps: 1e-12 }, vec![x.clone(), Tensor::full([16], 1.0), Tensor::zeros([16])]);
    for row in out.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }

    let out = eval(GradOp::LayerNorm { eps }, vec![x, Tensor::zeros([16]), Tensor::full([16], 2.5)]);
    assert!(out.data().iter().all(|&v| v == 2.5));

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2, 0]));
    let p = g.constant(Tensor::zeros([0]));
    assert!(g.layer_norm(x, p, p, eps).is_err());
}

#[test]
fn attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = Tensor::<f64>::uniform([1, 8], -1.0, 1.0, &mut rng);
    let k = Tensor::<f64>::uniform([1, 8], -1.0, 1.0, &mut rng);
    let v = Tensor::<f64>::uniform([1, 8], -1.0, 1.0, &mut rng);
    let out = eval(GradOp::Attention { groups: 1, heads: 2 }, vec![q, k, v.clone()]);
    assert!(out.max_abs_diff(&v) < 1e-15);

    // identical keys: uniform softmax, output = mean of values
    let q = Tensor::<f64>::uniform([5, 8], -1.0, 1.0, &mut rng);
    let key = Tensor::<f64>::uniform([1, 8], -1.0, 1.0, &mut rng);
    let k = Tensor::new([5, 8], key.data().repeat(5)).unwrap();
    let v = Tensor::<f64>::uniform([5, 8], -1.0, 1.0, &mut rng);
    let out = eval(GradOp::Attention { groups: 1, heads: 4 }, vec![q, k, v.clone()]);
    for c in 0..8 {
        let mean = (0..5).map(|r| v.data()[r * 8 + c]).sum::<f64>() / 5.0;
        for r in 0..5 {
            assert!((out.data()[r * 8 + c] - mean).abs() < 1e-12);
        }
    }

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([4, 6]));
    assert!(g.attention(x, x, x, 1, 4).is_err());
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let w = t.numel() / t.dim(0);
    let data = perm.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn attention_is_permutation_equivariant_on_four_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::<f64>::uniform([4, 8], -1.0, 1.0, &mut rng);
    let perm = [2, 0, 3, 1];
    let out = eval(GradOp::Attention { groups: 1, heads: 2 }, vec![x.clone(), x.clone(), x.clone()]);
    let px = permute_rows(&x, &perm);
    let pout = eval(GradOp::Attention { groups: 1, heads: 2 }, vec![px.clone(), px.clone(), px]);
    assert!(pout.max_abs_diff(&permute_rows(&out, &perm)) < 1e-12);
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::<f64>::uniform([3, 4], -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform([4, 2], -1.0, 1.0, &mut rng);
    assert!(grad_check(&GradOp::Matmul, &[a, b], 1e-5).unwrap() < 1e-8);

    let x = Tensor::<f64>::uniform([1, 8], -1.0, 1.0, &mut rng);
    let gm = Tensor::<f64>::uniform([8], 0.5, 1.5, &mut rng);
    let bt = Tensor::<f64>::uniform([8], -0.5, 0.5, &mut rng);
    assert!(grad_check(&GradOp::LayerNorm { eps: 1e-6 }, &[x, gm, bt], 1e-5).unwrap() < 1e-5);

    let qkv: Vec<_> = (0..3).map(|_| Tensor::<f64>::uniform([4, 8], -1.0, 1.0, &mut rng)).collect();
    assert!(grad_check(&GradOp::Attention { groups: 1, heads: 2 }, &qkv, 1e-5).unwrap() < 1e-5);

    let bad = Tensor::<f64>::from_f64([2], &[1.0, f64::NAN]).unwrap();
    assert!(grad_check(&GradOp::Exp, &[bad], 1e-5).is_err());
}

#[test]
fn every_op_passes_grad_check_over_ten_seeds() {
    for seed in 0..10 {
        for (name, op, inputs) in suite_cases(seed) {
            let err = grad_check(&op, &inputs, 1e-5).unwrap();
            assert!(err < 1e-5, "{name} seed {seed}: max rel err {err:e}");
        }
    }
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1], 1000.0));
    assert!(g.exp(x).is_err());
}

proptest! {
    #[test]
    fn attention_equivariance_holds_for_any_permutation(seed in 0u64..1000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::<f64>::uniform([6, 4], -2.0, 2.0, &mut rng);
        let k = Tensor::<f64>::uniform([6, 4], -2.0, 2.0, &mut rng);
        let v = Tensor::<f64>::uniform([6, 4], -2.0, 2.0, &mut rng);
        let out = eval(GradOp::Attention { groups: 1, heads: 2 }, vec![q.clone(), k.clone(), v.clone()]);
        let pout = eval(
            GradOp::Attention { groups: 1, heads: 2 },
            vec![permute_rows(&q, &perm), permute_rows(&k, &perm), permute_rows(&v, &perm)],
        );
        prop_assert!(pout.max_abs_diff(&permute_rows(&out, &perm)) < 1e-12);
    }

    #[test]
    fn bilinear_is_exact_on_constants(c in -5.0f64..5.0, h in 1usize..6, w in 1usize..6, oh in 1usize..9, ow in 1usize..9) {
        let out = eval(GradOp::BilinearResize { out_h: oh, out_w: ow }, vec![Tensor::full([1, 2, h, w], c)]);
        prop_assert!(out.data().iter().all(|&v| (v - c).abs() <= 1e-12 * c.abs().max(1.0)));
    }
}
