// Finite-difference checks for every tape primitive. Shared with the
// acceptance target in vsd-core via #[path].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsd_tensor::gradcheck::{central_difference, max_relative_error};
use vsd_tensor::{Conv2dGeometry, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;

/// Largest relative error between tape gradients and central differences of
/// `sum(build(inputs) * w)` over `instances` random draws.
pub fn check<B>(shapes: &[&[usize]], instances: usize, seed: u64, build: B) -> f64
where
    B: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();

        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&vars);
        let out_shape = out.shape();
        let weights = Tensor::<f64>::uniform(&out_shape, 1.0, &mut rng);
        let w = tape.constant(weights.clone());
        let loss = out.mul(w).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.wrt(*v).unwrap().to_vec()).collect();

        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let eval = |x: &[f64]| {
            let tape = Tape::new();
            let mut offset = 0;
            let vars: Vec<_> = shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let t = Tensor::from_vec(x[offset..offset + n].to_vec(), s).unwrap();
                    offset += n;
                    tape.constant(t)
                })
                .collect();
            let out = build(&vars).value();
            out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = central_difference(eval, &flat, FD_STEP);
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    worst
}

/// (name, worst relative error) for every primitive plus a 3-op composite.
pub fn run_all(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = || rng.random::<u64>();
    let conv = Conv2dGeometry { batch: 2, height: 5, width: 4, channels: 2, kernel: 3, stride: 2, padding: 1 };
    vec![
        ("matmul", check(&[&[3, 4], &[4, 2]], instances, s(), |v| v[0].matmul(v[1]).unwrap())),
        ("matmul_batched", check(&[&[2, 3, 4], &[2, 4, 3]], instances, s(), |v| v[0].matmul(v[1]).unwrap())),
        ("matmul_shared", check(&[&[2, 3, 4], &[4, 2]], instances, s(), |v| v[0].matmul(v[1]).unwrap())),
        ("matmul_t", check(&[&[2, 3, 4], &[2, 5, 4]], instances, s(), |v| v[0].matmul_t(v[1]).unwrap())),
        ("add", check(&[&[3, 4], &[3, 4]], instances, s(), |v| v[0].add(v[1]).unwrap())),
        ("sub", check(&[&[3, 4], &[3, 4]], instances, s(), |v| v[0].sub(v[1]).unwrap())),
        ("mul", check(&[&[3, 4], &[3, 4]], instances, s(), |v| v[0].mul(v[1]).unwrap())),
        ("scale", check(&[&[3, 4]], instances, s(), |v| v[0].scale(-1.7))),
        ("add_scalar", check(&[&[3, 4]], instances, s(), |v| v[0].add_scalar(0.3))),
        ("add_row", check(&[&[2, 3, 4], &[4]], instances, s(), |v| v[0].add_row(v[1]).unwrap())),
        ("mul_row", check(&[&[2, 3, 4], &[4]], instances, s(), |v| v[0].mul_row(v[1]).unwrap())),
        ("transpose", check(&[&[2, 3, 4]], instances, s(), |v| v[0].transpose(0, 2).unwrap())),
        ("permute", check(&[&[2, 3, 4]], instances, s(), |v| v[0].permute(&[1, 2, 0]).unwrap())),
        ("reshape", check(&[&[2, 3, 4]], instances, s(), |v| v[0].reshape(&[6, 4]).unwrap())),
        (
            "concat",
            check(&[&[2, 3, 4], &[2, 1, 4]], instances, s(), |v| Var::concat(&[v[0], v[1]], 1).unwrap()),
        ),
        ("repeat", check(&[&[3, 4]], instances, s(), |v| v[0].repeat(3))),
        ("softmax_last", check(&[&[3, 5]], instances, s(), |v| v[0].softmax(1).unwrap())),
        ("softmax_inner", check(&[&[3, 4, 2]], instances, s(), |v| v[0].softmax(1).unwrap())),
        ("layer_norm_last", check(&[&[3, 6]], instances, s(), |v| v[0].layer_norm(1).unwrap())),
        ("layer_norm_inner", check(&[&[2, 5, 3]], instances, s(), |v| v[0].layer_norm(1).unwrap())),
        (
            "attention",
            check(&[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]], instances, s(), |v| v[0].attention(v[1], v[2], 2).unwrap()),
        ),
        ("self_attention", check(&[&[1, 4, 6]], instances, s(), |v| v[0].attention(v[0], v[0], 3).unwrap())),
        ("gelu", check(&[&[4, 4]], instances, s(), |v| v[0].gelu())),
        ("relu", check(&[&[4, 4]], instances, s(), |v| v[0].relu())),
        ("sum", check(&[&[3, 4]], instances, s(), |v| v[0].sum())),
        ("mean", check(&[&[3, 4]], instances, s(), |v| v[0].mean())),
        ("l1_loss", check(&[&[3, 4], &[3, 4]], instances, s(), |v| v[0].l1_loss(v[1]).unwrap())),
        ("mse_loss", check(&[&[3, 4], &[3, 4]], instances, s(), |v| v[0].mse_loss(v[1]).unwrap())),
        ("im2col", check(&[&[2, 5, 4, 2]], instances, s(), move |v| v[0].im2col(conv).unwrap())),
        (
            "composite",
            check(&[&[4, 3], &[3, 5]], instances, s(), |v| v[0].matmul(v[1]).unwrap().gelu().softmax(1).unwrap()),
        ),
    ]
}
