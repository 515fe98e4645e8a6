use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use xct_core::actstore::Batch;
use xct_core::dictcore::*;
use xct_core::util::rng;

/// Brute-force reimplementation with nested loops over plain vectors.
struct Oracle {
    w_enc: Vec<Vec<Vec<f64>>>,
    b_enc: Vec<f64>,
    w_dec: Vec<Vec<Vec<f64>>>,
    b_dec: Vec<Vec<f64>>,
}

impl Oracle {
    fn from(p: &CrosscoderParams) -> Self {
        let m = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        Oracle {
            w_enc: p.w_enc.iter().map(m).collect(),
            b_enc: p.b_enc.to_vec(),
            w_dec: p.w_dec.iter().map(m).collect(),
            b_dec: p.b_dec.iter().map(|b| b.to_vec()).collect(),
        }
    }

    fn encode(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        (0..self.b_enc.len())
            .map(|i| {
                let mut s = self.b_enc[i];
                for c in 0..xs.len() {
                    for j in 0..xs[c].len() {
                        s += self.w_enc[c][i][j] * xs[c][j];
                    }
                }
                if s > 0.0 { s } else { 0.0 }
            })
            .collect()
    }

    fn decode(&self, f: &[f64], c: usize) -> Vec<f64> {
        (0..self.b_dec[c].len())
            .map(|j| self.b_dec[c][j] + (0..f.len()).map(|i| self.w_dec[c][i][j] * f[i]).sum::<f64>())
            .collect()
    }

    fn loss(&self, batch: &[Vec<Vec<f64>>], lambda: f64) -> f64 {
        let mut total = 0.0;
        for xs in batch {
            let f = self.encode(xs);
            for c in 0..xs.len() {
                let xh = self.decode(&f, c);
                for j in 0..xh.len() {
                    total += (xs[c][j] - xh[j]).powi(2);
                }
                for i in 0..f.len() {
                    let norm = self.w_dec[c][i].iter().map(|v| v * v).sum::<f64>().sqrt();
                    total += lambda * f[i] * norm;
                }
            }
        }
        total
    }
}

fn random_params(n: usize, dsz: usize, d: usize, seed: u64) -> CrosscoderParams {
    let mut r = rng(seed);
    let sources = (0..n).map(|c| format!("s{c}")).collect();
    let mut p = CrosscoderParams::zeros(sources, dsz, d).unwrap();
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    p
}

fn random_batch(n: usize, rows: usize, d: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| Array2::from_shape_fn((rows, d), |_| r.random_range(-2.0..2.0))).collect()
}

fn rows_of(xs: &[Array2<f64>]) -> Vec<Vec<Vec<f64>>> {
    (0..xs[0].nrows()).map(|b| xs.iter().map(|x| x.row(b).to_vec()).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encode_decode_loss_match_brute_force(n in 1usize..=3, dsz in 1usize..=16, d in 1usize..=8, rows in 1usize..6, seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let p = random_params(n, dsz, d, seed);
        let xs = random_batch(n, rows, d, seed ^ 1);
        let o = Oracle::from(&p);
        let f = p.encode_batch(&xs).unwrap();
        for (b, row) in rows_of(&xs).iter().enumerate() {
            let fo = o.encode(row);
            for i in 0..dsz {
                prop_assert!((f[[b, i]] - fo[i]).abs() <= 1e-6);
                prop_assert!(f[[b, i]] >= 0.0);
            }
            for c in 0..n {
                let xh = p.decode(f.row(b), &format!("s{c}")).unwrap();
                let xo = o.decode(&fo, c);
                for j in 0..d {
                    prop_assert!((xh[j] - xo[j]).abs() <= 1e-6);
                }
            }
        }
        let parts = p.loss(&xs, lambda).unwrap();
        let want = o.loss(&rows_of(&xs), lambda);
        prop_assert!((parts.total - want).abs() <= 1e-6 * want.abs().max(1.0));
        prop_assert!((parts.total - parts.recon.iter().sum::<f64>() - parts.sparsity).abs() <= 1e-9 * parts.total.abs().max(1.0));
        prop_assert!(parts.recon.iter().all(|&v| v >= 0.0) && parts.sparsity >= 0.0);
        let (gparts, _) = p.loss_grad(&xs, lambda).unwrap();
        prop_assert!((gparts.total - parts.total).abs() <= 1e-9 * parts.total.abs().max(1.0));
    }

    #[test]
    fn single_source_is_a_sparse_autoencoder(dsz in 1usize..=16, d in 1usize..=8, rows in 1usize..6, seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let p = random_params(1, dsz, d, seed);
        let xs = random_batch(1, rows, d, seed ^ 7);
        // SAE: f = ReLU(W_enc x + b_enc), x̂ = W_dec f + b_dec,
        // L = ‖x − x̂‖² + λ Σ_i f_i ‖W_dec[i]‖, written with ndarray products.
        let mut want = 0.0;
        for x in xs[0].rows() {
            let f = (p.w_enc[0].dot(&x) + &p.b_enc).mapv(|v| v.max(0.0));
            let xh = p.w_dec[0].t().dot(&f) + &p.b_dec[0];
            let norms: Array1<f64> = p.w_dec[0].rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            want += (&x - &xh).mapv(|v| v * v).sum() + lambda * f.dot(&norms);
        }
        let got = p.loss(&xs, lambda).unwrap().total;
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
    }
}

#[test]
fn hand_sized_encode() {
    // d = 2, D = 3, two sources.
    let mut p = CrosscoderParams::zeros(vec!["a".into(), "b".into()], 3, 2).unwrap();
    p.w_enc[0] = array![[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]];
    p.w_enc[1] = array![[0.5, 0.5], [-1.0, 0.0], [0.0, 2.0]];
    p.b_enc = array![0.1, -0.2, 0.0];
    let xa = array![1.0, 2.0];
    let xb = array![2.0, -1.0];
    let f = p.encode(&[xa.view(), xb.view()]).unwrap();
    // pre = [1 + 0.5 + 0.1, 2 − 2 − 0.2, −1 − 2 + 0] = [1.6, −0.2, −3]
    assert!((f[0] - 1.6).abs() < 1e-12);
    assert_eq!(f[1], 0.0);
    assert_eq!(f[2], 0.0);
}

#[test]
fn decode_identities() {
    let p = random_params(2, 5, 3, 4);
    let f0 = Array1::zeros(5);
    assert_eq!(p.decode(f0.view(), "s1").unwrap(), p.b_dec[1]);
    let mut e = Array1::zeros(5);
    e[2] = 1.0;
    let xh = p.decode(e.view(), "s0").unwrap();
    let want = &p.w_dec[0].row(2) + &p.b_dec[0];
    assert!((&xh - &want).iter().all(|v| v.abs() < 1e-12));
    assert!(p.decode(e.view(), "nope").is_err());
}

#[test]
fn zero_params_give_zero_features_and_input_energy_loss() {
    let p = CrosscoderParams::zeros(vec!["a".into(), "b".into()], 4, 3).unwrap();
    let xs = random_batch(2, 5, 3, 2);
    assert!(p.encode_batch(&xs).unwrap().iter().all(|&v| v == 0.0));
    let want: f64 = xs.iter().map(|x| x.mapv(|v| v * v).sum()).sum();
    let parts = p.loss(&xs, 2.0).unwrap();
    assert!((parts.total - want).abs() < 1e-12);
    assert_eq!(parts.sparsity, 0.0);
}

#[test]
fn source_count_mismatch_is_an_error() {
    let p = random_params(2, 4, 3, 1);
    let xs = random_batch(3, 2, 3, 1);
    assert!(p.encode_batch(&xs).is_err());
}

fn fd_check(n: usize, seed: u64) {
    let p = random_params(n, 12, 6, seed);
    let xs = random_batch(n, 7, 6, seed + 100);
    let lambda = 1.3;
    let (_, g) = p.loss_grad(&xs, lambda).unwrap();
    let grads: Vec<Vec<f64>> = g.tensors().into_iter().map(|(_, s)| s.to_vec()).collect();
    let names: Vec<String> = g.tensors().into_iter().map(|(n, _)| n).collect();
    let mut r = rng(seed + 7);
    let h = 1e-4;
    let mut checked = 0;
    let mut q = p.clone();
    while checked < 50 {
        let k = r.random_range(0..grads.len());
        let j = r.random_range(0..grads[k].len());
        let orig = q.tensors_mut()[k][j];
        // Skip coordinates whose perturbation crosses a ReLU kink.
        let pre = q.preactivations(&xs).unwrap();
        q.tensors_mut()[k][j] = orig + h;
        let up = q.loss(&xs, lambda).unwrap().total;
        let pre_up = q.preactivations(&xs).unwrap();
        q.tensors_mut()[k][j] = orig - h;
        let dn = q.loss(&xs, lambda).unwrap().total;
        let pre_dn = q.preactivations(&xs).unwrap();
        q.tensors_mut()[k][j] = orig;
        let kink = pre.iter().zip(pre_up.iter()).zip(pre_dn.iter()).any(|((a, b), c)| (a > &0.0) != (b > &0.0) || (a > &0.0) != (c > &0.0));
        if kink {
            continue;
        }
        let fd = (up - dn) / (2.0 * h);
        let an = grads[k][j];
        assert!(
            (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-2),
            "{}[{j}] analytic {an} numeric {fd}",
            names[k]
        );
        checked += 1;
    }
}

#[test]
fn gradients_match_finite_differences_one_source() {
    fd_check(1, 11);
}

#[test]
fn gradients_match_finite_differences_two_sources() {
    fd_check(2, 12);
}

#[test]
fn gradients_match_finite_differences_three_sources() {
    fd_check(3, 13);
}

#[test]
fn decoder_bias_gradient_is_twice_residual_sum() {
    let p = random_params(2, 6, 4, 5);
    let xs = random_batch(2, 9, 4, 6);
    let (_, g) = p.loss_grad(&xs, 0.7).unwrap();
    let f = p.encode_batch(&xs).unwrap();
    for c in 0..2 {
        let want = (p.decode_batch(&f, c).unwrap() - &xs[c]).sum_axis(ndarray::Axis(0)) * 2.0;
        assert!((&g.b_dec[c] - &want).iter().all(|v| v.abs() < 1e-10));
    }
}

#[test]
fn dead_feature_gets_no_sparsity_gradient() {
    let mut p = random_params(2, 6, 4, 8);
    p.b_enc[3] = -1e6;
    let xs = random_batch(2, 9, 4, 9);
    assert!(p.encode_batch(&xs).unwrap().column(3).iter().all(|&v| v == 0.0));
    let (_, g) = p.loss_grad(&xs, 5.0).unwrap();
    for c in 0..2 {
        assert!(g.w_dec[c].row(3).iter().all(|&v| v == 0.0));
        assert!(g.w_enc[c].row(3).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn warmup_schedule() {
    let hp = TrainHP { steps: 1000, ..Default::default() };
    assert_eq!(hp.lambda_at(0), 0.0);
    assert!((hp.lambda_at(50) - 2.0).abs() < 1e-12);
    assert!((hp.lambda_at(25) - 1.0).abs() < 1e-12);
    assert_eq!(hp.lambda_at(999), 2.0);
}

#[test]
fn reference_defaults() {
    let hp = TrainHP::default();
    assert_eq!(hp.lr, 5e-5);
    assert_eq!(hp.l1_coeff, 2.0);
    assert_eq!(hp.warmup_fraction, 0.05);
    assert_eq!(hp.dec_init_norm, 0.08);
    assert_eq!((hp.beta1, hp.beta2), (0.9, 0.999));
    assert_eq!(hp.batch_tokens, 4096);
    assert_eq!(hp.dict_size, 16384);
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    for hp in [
        TrainHP { warmup_fraction: 1.5, ..Default::default() },
        TrainHP { l1_coeff: -1.0, ..Default::default() },
        TrainHP { dec_init_norm: 0.0, ..Default::default() },
    ] {
        assert!(matches!(hp.validate(), Err(xct_core::Error::Config(_))));
    }
}

#[test]
fn init_decoder_norms_and_encoder_scaling() {
    let hp = TrainHP { dict_size: 64, seed: 3, ..Default::default() };
    let calib = random_batch(2, 200, 8, 4);
    let p = init_params(vec!["a".into(), "b".into()], 8, &hp, &calib).unwrap();
    for c in 0..2 {
        for n in p.dec_norms(c).iter() {
            assert!((n - 0.08).abs() < 1e-6);
        }
    }
    assert!(p.w_dec[0] != p.w_dec[1]);
    let pre = p.preactivations(&calib).unwrap();
    let mean = pre.mean().unwrap();
    let std = pre.mapv(|v| (v - mean).powi(2)).mean().unwrap().sqrt();
    assert!((std - 1.0).abs() < 1e-9);
    assert!(p.b_enc.iter().all(|&v| v == 0.0));
}

fn batches(xs: Vec<Array2<f64>>, rows: usize) -> impl Iterator<Item = Batch> {
    let total = xs[0].nrows();
    (0..).map(move |k| {
        let start = (k * rows) % total;
        let idx: Vec<usize> = (start..start + rows).map(|i| i % total).collect();
        Batch { epoch: 0, rows: idx.clone(), xs: xs.iter().map(|x| x.select(ndarray::Axis(0), &idx)).collect() }
    })
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let mut r = rng(21);
    // Sparse synthetic data: each row is a sum of two of 16 ground-truth directions.
    let dirs = Array2::from_shape_fn((16, 8), |_| r.random_range(-1.0..1.0));
    let data = Array2::from_shape_fn((512, 8), |_| 0.0);
    let mut data = data;
    for mut row in data.rows_mut() {
        for _ in 0..2 {
            let k = r.random_range(0..16);
            row.scaled_add(r.random_range(0.5..1.5), &dirs.row(k));
        }
    }
    let hp = TrainHP { lr: 1e-2, steps: 300, batch_tokens: 128, dict_size: 32, l1_coeff: 0.1, seed: 2, ..Default::default() };
    let run = || train_crosscoder(&hp, vec!["x".into()], batches(vec![data.clone()], 128), |_| {}).unwrap();
    let (p1, log1) = run();
    let (p2, log2) = run();
    assert_eq!(p1, p2);
    assert_eq!(log1, log2);
    assert_eq!(log1.len(), 300);
    let first = log1[0].recon[0];
    let last = log1.last().unwrap().recon[0];
    assert!(last < 0.2 * first, "recon {first} -> {last}");
}

#[test]
fn nan_input_aborts_with_step() {
    let mut xs = random_batch(1, 16, 4, 3);
    xs[0][[2, 1]] = f64::NAN;
    let hp = TrainHP { steps: 5, batch_tokens: 16, dict_size: 8, ..Default::default() };
    // Calibration needs finite data, so feed a clean first batch.
    let clean = random_batch(1, 16, 4, 4);
    let stream = std::iter::once(Batch { epoch: 0, rows: (0..16).collect(), xs: clean })
        .chain(std::iter::repeat(Batch { epoch: 0, rows: (0..16).collect(), xs }));
    match train_crosscoder(&hp, vec!["x".into()], stream, |_| {}) {
        Err(xct_core::Error::Numerical { step, component }) => {
            assert_eq!(step, 1);
            assert!(component.contains("reconstruction"));
        }
        other => panic!("expected numerical error, got {other:?}"),
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = random_params(3, 5, 4, 1);
    p.round_to_f32();
    let norms: Vec<_> = (0..3).map(|c| xct_core::actstore::NormStats { source: format!("s{c}"), scale: 1.5 + c as f64 }).collect();
    let path = dir.path().join("x.xccx");
    save_crosscoder(&path, &p, &norms).unwrap();
    let (q, n2) = load_crosscoder(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(norms, n2);
}
