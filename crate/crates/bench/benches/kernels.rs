use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use lesionpaint::diffusion::{ddim_reverse_step, forward_diffuse, gaussian_like};
use lesionpaint::inpaint::repaint_mix;
use lesionpaint::model::network_input;
use lesionpaint::nn::{loss_and_grads, Architecture, Network, Tape};
use lesionpaint::{NoisePredictor, NoiseSchedule};
use lesionpaint_bench::{phantom, tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let x = tensor(&[8, 32, 32, 32], 1);
    let w = tensor(&[32, 32, 3, 3], 2);
    let b = tensor(&[32], 3);
    c.bench_function("conv2d_3x3_8x32x32x32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            black_box(tape.conv2d(xv, wv, bv));
        })
    });
}

fn network(c: &mut Criterion) {
    let arch = Architecture::default();
    let net = Network::init(arch.clone(), 0).unwrap();
    let (img, mask) = phantom(64);
    let input = network_input::<f32>([(&img, &mask)]).unwrap();
    c.bench_function("unet_forward_1x64x64", |bench| {
        bench.iter_batched(|| input.clone(), |inp| black_box(net.forward(inp, &[500]).unwrap()), BatchSize::SmallInput)
    });
    let target = tensor(&[1, 2, 64, 64], 4);
    c.bench_function("unet_loss_and_grads_1x64x64", |bench| {
        bench.iter_batched(
            || (input.clone(), target.clone()),
            |(inp, tgt)| black_box(loss_and_grads(&arch, net.params(), inp, &[500], tgt, 1.0).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

fn schedule(c: &mut Criterion) {
    c.bench_function("cosine_schedule_1000", |bench| {
        bench.iter(|| black_box(NoiseSchedule::cosine(1000, 0.008).unwrap()))
    });
}

fn sampler_step(c: &mut Criterion) {
    let sched = NoiseSchedule::cosine(1000, 0.008).unwrap();
    let model = lesionpaint::DenoiserModel::analytic(lesionpaint::GaussianPrior::standard(2), sched.clone());
    let (img, mask) = phantom(64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = gaussian_like(&img, &mut rng);
    let x_t = forward_diffuse(&img, 500, &eps, &sched).unwrap();
    c.bench_function("ddim_step_with_mix_64x64", |bench| {
        bench.iter(|| {
            let e = model.predict_noise(&x_t, &mask, 500).unwrap();
            let prev = ddim_reverse_step(&x_t, &e, 500, 490, &sched, None).unwrap();
            black_box(repaint_mix(&prev, &img, &mask).unwrap())
        })
    });
}

criterion_group!(benches, conv, network, schedule, sampler_step);
criterion_main!(benches);
