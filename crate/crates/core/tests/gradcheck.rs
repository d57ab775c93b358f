use lesionpaint::nn::{
    adam_step, loss_and_grads, AdamConfig, AdamState, Architecture, MlpSpec, Params, Tensor, UnetSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Largest relative difference between analytic and central-difference
/// gradients over every parameter.
fn worst_relative_error(arch: &Architecture, hw: usize, seed: u64, h: f64) -> f64 {
    let params: Params<f64> = arch.init_params(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = arch.image_channels();
    let input = random(vec![2, c + 1, hw, hw], &mut rng);
    let target = random(vec![2, c, hw, hw], &mut rng);
    let ts = [3, 870];
    let loss = |p: &Params<f64>| loss_and_grads(arch, p, input.clone(), &ts, target.clone(), 1.0).unwrap();
    let (_, grads) = loss(&params);
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        for j in 0..p.tensors()[i].len() {
            let orig = p.tensors()[i].data()[j];
            p.tensors_mut()[i].data_mut()[j] = orig + h;
            let up = loss(&p).0;
            p.tensors_mut()[i].data_mut()[j] = orig - h;
            let down = loss(&p).0;
            p.tensors_mut()[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[i].data()[j];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-7));
        }
    }
    worst
}

fn tiny_unets() -> [(u64, UnetSpec); 2] {
    [
        (
            1,
            UnetSpec {
                image_channels: 2,
                widths: vec![4, 4],
                blocks_per_level: 1,
                groups: 2,
                time_dim: 4,
                embed_dim: 4,
            },
        ),
        (
            2,
            UnetSpec {
                image_channels: 1,
                widths: vec![2, 4],
                blocks_per_level: 2,
                groups: 1,
                time_dim: 2,
                embed_dim: 3,
            },
        ),
    ]
}

// Group norm makes the loss scale-invariant in the preceding conv weights, so
// at h = 1e-3 the central-difference truncation error alone exceeds 1e-4 on a
// few parameters. Correct gradients show that error falling as h^2.
#[test]
fn unet_gradients_match_finite_differences() {
    for (seed, arch) in tiny_unets() {
        let e = worst_relative_error(&Architecture::Unet(arch), 4, seed, 1e-5);
        assert!(e < 1e-4, "seed {seed}: {e:e}");
    }
}

#[test]
fn unet_finite_difference_error_shrinks_quadratically() {
    for (seed, arch) in tiny_unets() {
        let arch = Architecture::Unet(arch);
        let coarse = worst_relative_error(&arch, 4, seed, 1e-3);
        let fine = worst_relative_error(&arch, 4, seed, 1e-4);
        assert!(fine < coarse / 50.0 || fine < 1e-6, "seed {seed}: {coarse:e} -> {fine:e}");
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let arch = Architecture::Mlp(MlpSpec { image_channels: 2, hidden: 6, layers: 2, time_dim: 4, embed_dim: 5 });
    let e = worst_relative_error(&arch, 3, 3, 1e-3);
    assert!(e < 1e-4, "{e:e}");
}

#[test]
fn adam_descends_the_gradient_check_loss() {
    let arch = Architecture::Mlp(MlpSpec { image_channels: 1, hidden: 8, layers: 1, time_dim: 4, embed_dim: 4 });
    let mut params: Params<f64> = arch.init_params(9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = random(vec![4, 2, 3, 3], &mut rng);
    let target = random(vec![4, 1, 3, 3], &mut rng);
    let mut state = AdamState::zeros(params.tensors());
    let cfg = AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() };
    let mut losses = Vec::new();
    for step in 1..=200u64 {
        let (l, g) = loss_and_grads(&arch, &params, input.clone(), &[10, 20, 30, 40], target.clone(), 1.0).unwrap();
        losses.push(l);
        adam_step(params.tensors_mut(), &g, &mut state, step, &cfg).unwrap();
    }
    assert!(losses[199] < 0.5 * losses[0], "{} -> {}", losses[0], losses[199]);
}
