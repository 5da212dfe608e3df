use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softgem::mlp_model::{Example, Mlp, MlpArchitecture};
use softgem::task_streams::{make_synthetic_base, Dataset};

#[test]
fn linear_probe_separates_synthetic_clusters() {
    let data = make_synthetic_base(10, 16, 100, 11);
    let arch = MlpArchitecture::new(16, vec![], 1, 10).unwrap();
    let mut model = Mlp::init(arch, 3).unwrap();
    for _ in 0..20 {
        for chunk in data.inputs.chunks(10).zip(data.labels.chunks(10)) {
            let batch: Vec<Example<'_>> = chunk
                .0
                .iter()
                .zip(chunk.1)
                .map(|(x, &label)| Example {
                    input: x,
                    task_id: 1,
                    label,
                })
                .collect();
            let (_, g) = model.loss_and_grad(&batch).unwrap();
            model.sgd_step(&g, 0.1).unwrap();
        }
    }
    let acc = model.evaluate(&data, 1).unwrap();
    assert!(acc > 0.9, "probe accuracy {acc}");
}

#[test]
fn untrained_head_is_at_chance_on_random_labels() {
    let k = 5;
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let data = Dataset::new(inputs, labels).unwrap();
    let model = Mlp::init(MlpArchitecture::new(8, vec![16], 1, k).unwrap(), 5).unwrap();
    let acc = model.evaluate(&data, 1).unwrap();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() < 4.0 * sigma, "accuracy {acc}, chance {p} ± {sigma}");
}

/// Forward pass written directly against the documented parameter layout.
fn reference_forward(arch: &MlpArchitecture, theta: &[f64], x: &[f64], task_id: usize) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut off = 0;
    let mut fan_in = arch.input_dim;
    for &width in &arch.hidden_dims {
        let mut next = vec![0.0; width];
        for (o, out) in next.iter_mut().enumerate() {
            let mut z = theta[off + fan_in * width + o];
            for i in 0..fan_in {
                z += theta[off + o * fan_in + i] * h[i];
            }
            *out = z.max(0.0);
        }
        off += (fan_in + 1) * width;
        fan_in = width;
        h = next;
    }
    let c = arch.classes_per_head;
    let head = off + (task_id - 1) * (fan_in + 1) * c;
    (0..c)
        .map(|k| {
            let mut z = theta[head + fan_in * c + k];
            for i in 0..fan_in {
                z += theta[head + k * fan_in + i] * h[i];
            }
            z
        })
        .collect()
}

#[test]
fn forward_matches_reference_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..20 {
        let hidden: Vec<usize> = (0..case % 4).map(|_| rng.gen_range(1..12)).collect();
        let arch = MlpArchitecture::new(6, hidden, 3, 4).unwrap();
        let theta: Vec<f64> = (0..arch.parameter_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let model = Mlp::from_parameters(arch.clone(), theta.clone().into(), 0).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for task in 1..=3 {
            let got = model.forward(&x, task).unwrap();
            let want = reference_forward(&arch, &theta, &x, task);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }
}
