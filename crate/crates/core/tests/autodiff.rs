use physpred::autodiff::{concat, Padding, UnaryKind};
use physpred::Var;
use physpred::gradcheck::check_gradient;
use physpred::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn add_is_componentwise() {
    let g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
}

#[test]
fn multiplying_by_zero_annihilates_value_and_gradient() {
    let g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]));
    let y = x.mul_scalar(0.0);
    assert_eq!(y.value().max_abs(), 0.0);
    let grads = g.backward(y.sum()).unwrap();
    assert_eq!(grads.wrt(x).unwrap().max_abs(), 0.0);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let msg = a.add(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn division_by_exact_zero_is_an_error() {
    let g = Graph::new();
    let a = g.constant(Tensor::ones(&[2]));
    let b = g.constant(t(&[2], &[1.0, 0.0]));
    assert!(a.div(&b).is_err());
    assert!(a.div_scalar(0.0).is_err());
}

#[test]
fn mul_gradient_matches_central_differences() {
    let b = Tensor::randn(&[3, 3], 1.0, &mut rng(1));
    let a = Tensor::randn(&[3, 3], 1.0, &mut rng(2));
    let report = check_gradient(
        |g, x| Ok(x.mul(&g.constant(b.clone()))?.sum()),
        &a,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
    // and the analytic gradient is exactly b
    let g = Graph::new();
    let x = g.leaf(a.clone());
    let grads = g.backward(x.mul(&g.constant(b.clone())).unwrap().sum()).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), b);
}

#[test]
fn div_and_sub_gradients() {
    let a = Tensor::rand_uniform(&[4], 0.5, 2.0, &mut rng(3));
    let b = Tensor::rand_uniform(&[4], 0.5, 2.0, &mut rng(4));
    for which in 0..2 {
        let (x, other) = if which == 0 { (&a, &b) } else { (&b, &a) };
        let report = check_gradient(
            |g, v| {
                let o = g.constant(other.clone());
                let (num, den) = if which == 0 { (v, o) } else { (o, v) };
                Ok(num.div(&den)?.sub(&v.square())?.sum())
            },
            x,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}

#[test]
fn unary_values_at_zero() {
    let g = Graph::new();
    let z = g.leaf(Tensor::zeros(&[1]));
    assert_eq!(z.sigmoid().item(), 0.5);
    assert_eq!(z.tanh().item(), 0.0);
    let grads = g.backward(z.sigmoid().sum()).unwrap();
    assert_eq!(grads.wrt(z).unwrap().item(), 0.25);
    let fd = check_gradient(|_, x| Ok(x.sigmoid().sum()), &Tensor::zeros(&[1]), 1e-6, 1e-8).unwrap();
    assert!(fd.passed(), "{fd}");
}

#[test]
fn unary_ranges_and_gradients() {
    let x = Tensor::randn(&[20], 3.0, &mut rng(5));
    let g = Graph::new();
    let v = g.constant(x.clone());
    assert!(v.sigmoid().value().data().iter().all(|&s| s > 0.0 && s < 1.0));
    assert!(v.tanh().value().data().iter().all(|&s| s > -1.0 && s < 1.0));
    for kind in [
        UnaryKind::Sigmoid,
        UnaryKind::Tanh,
        UnaryKind::Neg,
        UnaryKind::Square,
        UnaryKind::Gelu,
        UnaryKind::Relu,
    ] {
        let w = Tensor::randn(&[20], 1.0, &mut rng(6));
        let report = check_gradient(|g, v| Ok(v.unary(kind).mul(&g.constant(w.clone()))?.sum()), &x, 1e-6, 1e-4).unwrap();
        assert!(report.passed(), "{report}");
    }
}

#[test]
fn matmul_examples() {
    let g = Graph::new();
    let m = Tensor::randn(&[3, 4], 1.0, &mut rng(7));
    let id = g.constant(Tensor::identity(3));
    assert_eq!(id.matmul(&g.constant(m.clone())).unwrap().value().as_ref(), &m);
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
    assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 7.0]);
    assert!(a.matmul(&g.constant(Tensor::zeros(&[3, 1]))).is_err());
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let a = Tensor::randn(&[4, 5], 1.0, &mut rng(8));
    let b = Tensor::randn(&[5, 3], 1.0, &mut rng(9));
    let w = Tensor::randn(&[4, 3], 1.0, &mut rng(10));
    let ra = check_gradient(
        |g, x| Ok(x.matmul(&g.constant(b.clone()))?.mul(&g.constant(w.clone()))?.sum()),
        &a,
        1e-6,
        1e-4,
    )
    .unwrap();
    let rb = check_gradient(
        |g, x| Ok(g.constant(a.clone()).matmul(&x)?.mul(&g.constant(w.clone()))?.sum()),
        &b,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(ra.passed(), "{ra}");
    assert!(rb.passed(), "{rb}");
}

#[test]
fn conv2d_pointwise_identity_and_delta_kernel() {
    let x = Tensor::randn(&[2, 1, 5, 6], 1.0, &mut rng(11));
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let one = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = xv.conv2d(&one, None, 1, Padding::Same).unwrap();
    assert_eq!(y.value().as_ref(), &x);
    let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
    delta.set(&[0, 0, 1, 1], 1.0);
    let y = xv.conv2d(&g.constant(delta), None, 1, Padding::Same).unwrap();
    assert_eq!(y.value().as_ref(), &x);
}

#[test]
fn conv2d_central_difference_of_ramp() {
    // f(x, y) = x with x the column index
    let (h, w) = (6, 7);
    let f = Tensor::from_fn(&[1, 1, h, w], |i| i[3] as f64);
    let k = t(&[1, 1, 3, 3], &[0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0]);
    let g = Graph::new();
    let out = g.constant(f).conv2d(&g.constant(k), None, 1, Padding::Same).unwrap();
    let out = out.value();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            assert!((out.at(&[0, 0, y, x]) - 1.0).abs() < 1e-15);
        }
    }
}

#[test]
fn conv2d_errors() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    assert!(x.conv2d(&g.constant(Tensor::zeros(&[1, 3, 3, 3])), None, 1, Padding::Same).is_err());
    assert!(x.conv2d(&g.constant(Tensor::zeros(&[1, 2, 2, 2])), None, 1, Padding::Same).is_err());
    assert!(x.conv2d(&g.constant(Tensor::zeros(&[1, 2, 2, 2])), None, 2, Padding::Valid).is_ok());
}

#[test]
fn conv_family_gradients() {
    let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng(12));
    let k = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng(13));
    let kt = Tensor::randn(&[3, 2, 2, 2], 0.5, &mut rng(14));
    let bank = Tensor::randn(&[5, 3, 3], 0.5, &mut rng(15));
    let bias = Tensor::randn(&[4], 0.5, &mut rng(16));
    for stride in [1, 2] {
        let pad = if stride == 1 { Padding::Same } else { Padding::Valid };
        let rx = check_gradient(
            |g, v| weighted(v.conv2d(&g.constant(k.clone()), Some(&g.constant(bias.clone())), stride, pad)?),
            &x,
            1e-6,
            1e-4,
        )
        .unwrap();
        let rk = check_gradient(|g, v| weighted(g.constant(x.clone()).conv2d(&v, None, stride, pad)?), &k, 1e-6, 1e-4).unwrap();
        let rb = check_gradient(
            |g, v| weighted(g.constant(x.clone()).conv2d(&g.constant(k.clone()), Some(&v), stride, pad)?),
            &bias,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rx.passed() && rk.passed() && rb.passed(), "{rx}\n{rk}\n{rb}");
    }
    let rt = check_gradient(
        |g, v| Ok(v.conv_transpose2d(&g.constant(kt.clone()), None, 2)?.square().sum()),
        &x,
        1e-6,
        1e-4,
    )
    .unwrap();
    let rtk = check_gradient(
        |g, v| Ok(g.constant(x.clone()).conv_transpose2d(&v, None, 2)?.square().sum()),
        &kt,
        1e-6,
        1e-4,
    )
    .unwrap();
    let rbank = check_gradient(|g, v| Ok(g.constant(x.clone()).depthwise_bank(&v)?.tanh().sum()), &bank, 1e-6, 1e-4).unwrap();
    let rbx = check_gradient(|g, v| Ok(v.depthwise_bank(&g.constant(bank.clone()))?.tanh().sum()), &x, 1e-6, 1e-4).unwrap();
    assert!(rt.passed() && rtk.passed() && rbank.passed() && rbx.passed(), "{rt}\n{rtk}\n{rbank}\n{rbx}");
}

#[test]
fn transposed_conv_with_identity_weights_and_unit_stride_is_identity() {
    let x = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng(18));
    let mut w = Tensor::zeros(&[2, 2, 1, 1]);
    w.set(&[0, 0, 0, 0], 1.0);
    w.set(&[1, 1, 0, 0], 1.0);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv_transpose2d(&g.constant(w), None, 1).unwrap();
    assert_eq!(y.value().as_ref(), &x);
}

#[test]
fn structural_ops_gradients() {
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(19));
    let w = Tensor::randn(&[4, 5], 1.0, &mut rng(20));
    let gamma = Tensor::randn(&[4], 1.0, &mut rng(21));
    let checks = [
        check_gradient(|_, v| Ok(v.permute(&[2, 0, 1])?.reshape(&[4, 6])?.softmax_last().square().sum()), &x, 1e-6, 1e-4),
        check_gradient(
            |g, v| {
                let rows = v.reshape(&[6, 4])?;
                let y = rows.layer_norm(&g.constant(gamma.clone()), &g.constant(Tensor::zeros(&[4])), 1e-5)?;
                Ok(y.linear(&g.constant(w.clone()), None)?.tanh().sum())
            },
            &x,
            1e-6,
            1e-4,
        ),
        check_gradient(
            |g, v| {
                let a = v.reshape(&[2, 3, 4])?;
                let b = g.constant(Tensor::randn(&[2, 5, 4], 1.0, &mut rng(22)));
                Ok(a.batch_matmul(&b, true)?.square().sum())
            },
            &x,
            1e-6,
            1e-4,
        ),
        check_gradient(
            |g, v| {
                let other = g.constant(Tensor::randn(&[2, 1, 4], 1.0, &mut rng(23)));
                Ok(concat(&[v, other], 1)?.narrow_axis1(1, 3)?.square().sum())
            },
            &x,
            1e-6,
            1e-4,
        ),
        check_gradient(|_, v| Ok(v.upsample_bilinear(3)?.tanh().sum()), &x, 1e-6, 1e-4),
    ];
    for r in checks {
        let r = r.unwrap();
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn backward_of_sum_and_sum_of_squares() {
    let g = Graph::new();
    let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
    let grads = g.backward(x.sum()).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), Tensor::ones(&[2, 2]));
    let grads = g.backward(x.square().sum()).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn composite_conv_sigmoid_loss_matches_finite_differences_on_all_parameters() {
    let mut store = ParamStore::new();
    let mut r = rng(24);
    let k = store.add("k", Tensor::randn(&[2, 1, 3, 3], 0.5, &mut r));
    let b = store.add("b", Tensor::randn(&[2], 0.5, &mut r));
    let x = Tensor::randn(&[1, 1, 5, 5], 1.0, &mut r);
    let report = physpred::gradcheck::check_param_gradients(
        &store,
        |g, s| {
            let y = g
                .constant(x.clone())
                .conv2d(&g.param(s, k), Some(&g.param(s, b)), 1, Padding::Same)?
                .sigmoid();
            Ok(y.square().mean())
        },
        |_| true,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut store = ParamStore::new();
    let p = store.add("p", t(&[2], &[1.0, 2.0]));
    for expected in [1.0, 2.0] {
        let g = Graph::new();
        let loss = g.param(&store, p).square().sum();
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[2.0 * expected, 4.0 * expected]);
    }
    store.zero_grad();
    assert_eq!(store.grad(p).max_abs(), 0.0);
}

#[test]
fn shared_parameter_gets_a_single_summed_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("p", t(&[1], &[3.0]));
    let g = Graph::new();
    let a = g.param(&store, p);
    let b = g.param(&store, p);
    assert_eq!(a.id(), b.id());
    let loss = a.mul(&b).unwrap().sum();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.grad(p).data(), &[6.0]);
}

#[test]
fn untracked_constants_never_get_gradients() {
    let g = Graph::new();
    let c = g.constant(Tensor::ones(&[2]));
    assert!(!c.requires_grad());
    let grads = g.backward(c.square().sum()).unwrap();
    assert!(grads.wrt(c).is_none());
}

#[test]
fn check_gradient_of_sum_is_exact_on_dyadic_inputs() {
    let x = t(&[4], &[0.5, -1.25, 2.0, 0.0]);
    let r = check_gradient(|_, v| Ok(v.sum()), &x, 1.0 / 1024.0, 0.0).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    let xr = Tensor::randn(&[6], 1.0, &mut rng(25));
    let r = check_gradient(|_, v| Ok(v.sum()), &xr, 1e-6, 1e-9).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn check_gradient_of_sum_of_squares_is_tight() {
    let x = Tensor::randn(&[10], 1.0, &mut rng(26));
    let r = check_gradient(|_, v| Ok(v.square().sum()), &x, 1e-5, 1e-6).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn check_gradient_rejects_non_finite_objective_and_bad_step() {
    let x = Tensor::ones(&[2]);
    assert!(check_gradient(|_, v| Ok(v.mul_scalar(f64::INFINITY).sum()), &x, 1e-6, 1e-4).is_err());
    assert!(check_gradient(|_, v| Ok(v.sum()), &x, 0.0, 1e-4).is_err());
}

fn weighted(out: Var<'_>) -> physpred::Result<Var<'_>> {
    let w = Tensor::randn(&out.shape(), 1.0, &mut rng(17));
    Ok(out.mul(&out.graph().constant(w))?.sum())
}

fn objective_grad(x: &Tensor, a: f64, b: f64) -> Tensor {
    let g = Graph::new();
    let v = g.leaf(x.clone());
    let f = v.tanh().sum().mul_scalar(a);
    let h = v.square().sum().mul_scalar(b);
    let grads = g.backward(f.add(&h).unwrap()).unwrap();
    grads.wrt(v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = Tensor::randn(&[5], 1.0, &mut rng(seed));
        let combined = objective_grad(&x, a, b);
        let fa = objective_grad(&x, 1.0, 0.0);
        let fb = objective_grad(&x, 0.0, 1.0);
        for i in 0..5 {
            let expect = a * fa.data()[i] + b * fb.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_op_sequences_are_bit_identical(seed in 0u64..1000) {
        let run = || {
            let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng(seed));
            let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng(seed + 1));
            let g = Graph::new();
            let xv = g.leaf(x);
            let kv = g.leaf(k);
            let y = xv.conv2d(&kv, None, 1, Padding::Same).unwrap().sigmoid().square().sum();
            let grads = g.backward(y).unwrap();
            (y.item(), grads.wrt(xv).unwrap(), grads.wrt(kv).unwrap())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
        prop_assert_eq!(a.2, b.2);
    }
}
