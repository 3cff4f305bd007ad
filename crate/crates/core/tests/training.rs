use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchinv::checkpoint::{Checkpoint, TensorFile};
use sketchinv::image::ImageU8;
use sketchinv::net::CsiNetwork;
use sketchinv::pipeline::{batch_indices, TrainConfig, Trainer, TrainingSet};
use sketchinv::sketch::Style;
use sketchinv::tensor::Parameterized;

fn toy_set(n: usize, size: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = || ImageU8::from_fn(size, size, 3, |_, _, _| rng.gen()).unwrap();
    TrainingSet {
        names: (0..n).map(|i| format!("face_{i}")).collect(),
        sketches: (0..n).map(|_| img()).collect(),
        photos: (0..n).map(|_| img()).collect(),
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        style: Style::Color,
        image_size: 16,
        minibatch: 2,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn resumed_training_replays_iteration_101() {
    let data = toy_set(5, 16, 1);
    let mut straight = Trainer::new(config(), data.clone()).unwrap();
    let mut records = Vec::new();
    for _ in 0..101 {
        records.push(straight.step().unwrap());
    }

    let mut first = Trainer::new(config(), data.clone()).unwrap();
    for _ in 0..100 {
        first.step().unwrap();
    }
    let bytes = first.checkpoint().to_tensor_file().to_bytes();
    drop(first);
    let restored = Checkpoint::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
    let mut resumed = Trainer::resume(config(), data, restored).unwrap();
    assert_eq!(resumed.iteration(), 100);
    let next = resumed.step().unwrap();
    assert_eq!(next, records[100]);
    assert_eq!(next.iteration, 101);
    assert!(records[100].pixel < records[0].pixel);
}

#[test]
fn resume_rejects_a_different_configuration() {
    let data = toy_set(3, 16, 2);
    let mut t = Trainer::new(config(), data.clone()).unwrap();
    t.step().unwrap();
    let ck = t.checkpoint();
    for bad in [
        TrainConfig { seed: 10, ..config() },
        TrainConfig {
            style: Style::Grayscale,
            ..config()
        },
        TrainConfig {
            image_size: 32,
            ..config()
        },
    ] {
        assert!(Trainer::resume(bad, data.clone(), ck.clone()).is_err());
    }
}

#[test]
fn minibatches_cover_each_epoch_exactly_once() {
    for (n, b) in [(8, 4), (5, 2), (7, 3), (1, 4)] {
        let per_epoch = n * 3;
        let seen: Vec<usize> = (0..(per_epoch / b) as u64)
            .flat_map(|i| batch_indices(n, b, 4, i))
            .collect();
        for epoch in seen.chunks(n).filter(|c| c.len() == n) {
            let mut sorted = epoch.to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }
    assert_eq!(batch_indices(8, 4, 1, 7), batch_indices(8, 4, 1, 7));
}

// Kernel, bias and batch-norm scale and shift for every convolution, with
// (in, out, ksize) read off the layer table.
#[test]
fn parameter_count_matches_the_layer_table() {
    let mut convs = vec![(3, 32, 9), (32, 64, 3), (64, 128, 3)];
    convs.extend(std::iter::repeat_n((128, 128, 3), 10));
    convs.extend([(128, 64, 3), (64, 32, 3), (32, 3, 9)]);
    let oracle: usize = convs.iter().map(|&(i, o, k)| o * i * k * k + 3 * o).sum();
    assert_eq!(oracle, 1_679_241);
    assert_eq!(CsiNetwork::<f32>::build(3, 0).unwrap().parameter_count(), oracle);
    let gray = CsiNetwork::<f32>::build(1, 0).unwrap().parameter_count();
    assert_eq!(oracle - gray, 2 * 32 * 81);
}
