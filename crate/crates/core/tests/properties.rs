use cvaegan::cgan::{d_loss, g_loss};
use cvaegan::cond_aug::kl_to_standard_normal;
use cvaegan::data::{
    class_disjoint_split, crop_window, epoch_batches, parse_embeddings, BBox, EmbeddingTable, DEFAULT_CROP_RATIO,
};
use cvaegan::harness::{Checkpoint, LossLog, RngState};
use cvaegan::metrics::{fid, fid_unclamped, inception_score, matrix_sqrt_psd, GaussianStats};
use cvaegan::optim::{Adam, AdamConfig};
use cvaegan_tensor::{Graph, ParamStore, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn geometry() -> impl Strategy<Value = (u32, u32, BBox)> {
    (1u32..300, 1u32..300)
        .prop_flat_map(|(w, h)| (Just(w), Just(h), 1..=w, 1..=h))
        .prop_flat_map(|(w, h, bw, bh)| (Just(w), Just(h), Just(bw), Just(bh), 0..=w - bw, 0..=h - bh))
        .prop_map(|(w, h, bw, bh, x, y)| (w, h, BBox { x, y, w: bw, h: bh }))
}

fn random_matrix(rows: usize, cols: usize, values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| values[(i * cols + j) % values.len()])
}

fn gaussian(d: usize, values: &[f64]) -> GaussianStats {
    let b = random_matrix(d, d + 2, values);
    let mut cov = &b * b.transpose();
    for i in 0..d {
        cov[(i, i)] += 0.1;
    }
    GaussianStats {
        mean: DVector::from_fn(d, |i, _| values[(i * 7 + 3) % values.len()]),
        cov,
    }
}

fn scalar_graph(values: &[f64]) -> (Graph<f64>, Vec<cvaegan_tensor::Var>) {
    let mut g = Graph::new();
    let vars = values
        .iter()
        .map(|&v| g.constant(Tensor::new([1, 1], vec![v]).unwrap()))
        .collect();
    (g, vars)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn crop_keeps_bbox_and_ratio((w, h, bbox) in geometry()) {
        let win = crop_window(w, h, bbox, DEFAULT_CROP_RATIO).unwrap();
        let full = BBox { x: 0, y: 0, w, h };
        prop_assert!(full.contains(&win));
        prop_assert!(win.contains(&bbox));
        let long = bbox.w.max(bbox.h);
        if long <= w.min(h) {
            prop_assert_eq!(win.w, win.h);
            prop_assert!(long as f64 / win.w as f64 >= DEFAULT_CROP_RATIO);
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let n_train = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let (train, test) = class_disjoint_split(&ids, n_train, seed).unwrap();
        prop_assert_eq!(train.len(), n_train);
        prop_assert!(train.iter().all(|c| !test.contains(c)));
        let mut all: Vec<usize> = train.into_iter().chain(test).collect();
        all.sort_unstable();
        prop_assert_eq!(all, ids);
    }

    #[test]
    fn epoch_batches_are_disjoint_full_batches(n in 0usize..500, bs in 1usize..70, seed in any::<u64>(), epoch in 0usize..100) {
        let batches = epoch_batches(n, bs, seed, epoch);
        prop_assert_eq!(batches.len(), n / bs);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| b.len() == bs));
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), (n / bs) * bs);
        prop_assert!(seen.iter().all(|&i| i < n));
        prop_assert_eq!(batches, epoch_batches(n, bs, seed, epoch));
    }

    #[test]
    fn emb_round_trip_is_bit_exact(count in 0usize..6, dim in 1usize..9, bits in prop::collection::vec(any::<u32>(), 54)) {
        let data: Vec<f32> = (0..count * dim).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
        let table = EmbeddingTable::new(count, dim, data.clone()).unwrap();
        let bytes = table.to_bytes();
        let back = parse_embeddings(&bytes).unwrap();
        prop_assert_eq!((back.count, back.dim), (count, dim));
        prop_assert!(back.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_emb_is_a_format_error(count in 1usize..4, dim in 1usize..4, cut in 1usize..8) {
        let bytes = EmbeddingTable::new(count, dim, vec![0.5; count * dim]).unwrap().to_bytes();
        let cut = cut.min(bytes.len());
        let is_format = matches!(parse_embeddings(&bytes[..bytes.len() - cut]), Err(cvaegan::Error::Format { .. }));
        prop_assert!(is_format);
    }

    #[test]
    fn ckpt_round_trip_is_bit_exact(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..5),
        bits in prop::collection::vec(any::<u32>(), 1..40),
        config in "[a-z_=0-9\n]{0,40}",
        epoch in any::<u32>(),
        seed in any::<[u8; 32]>(),
        stream in any::<u64>(),
        word_pos in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos as u128);
        let mut ckpt = Checkpoint::new(config, epoch, RngState::capture(&rng));
        for (k, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| f32::from_bits(bits[(i + k) % bits.len()])).collect();
            ckpt.entries.push((format!("t{k}.weight"), Tensor::new(shape.clone(), data).unwrap()));
        }
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.epoch, epoch);
        prop_assert_eq!(&back.config, &ckpt.config);
        prop_assert_eq!(back.rng.restore().get_word_pos(), rng.get_word_pos());
    }

    #[test]
    fn loss_log_csv_round_trip(rows in prop::collection::vec((0usize..50, 0usize..50, "[a-z_]{1,8}", any::<f64>()), 0..30)) {
        let mut log = LossLog::default();
        for (e, m, n, v) in &rows {
            log.push(*e, *m, n, if v.is_finite() { *v } else { 0.0 });
        }
        prop_assert_eq!(LossLog::parse_csv(&log.to_csv()).unwrap(), log);
    }

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 1..12), lv in prop::collection::vec(-5.0f64..5.0, 12)) {
        let n = mu.len();
        let mut g = Graph::new();
        let m = g.constant(Tensor::new([1, n], mu.clone()).unwrap());
        let l = g.constant(Tensor::new([1, n], lv[..n].to_vec()).unwrap());
        let kl = kl_to_standard_normal(&mut g, m, l).unwrap();
        let v = g.value(kl).item().unwrap();
        prop_assert!(v >= 0.0);
        let oracle: f64 = mu.iter().zip(&lv).map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l)).sum();
        prop_assert!((v - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn gan_loss_bounds(df in 0.0f64..=1.0, dr in 0.0f64..=1.0, kl in 0.0f64..10.0) {
        let (mut g, v) = scalar_graph(&[dr, df]);
        let d = d_loss(&mut g, v[0], v[1]).unwrap();
        prop_assert!(g.value(d).item().unwrap() <= 0.0);
        let kl = g.constant(Tensor::scalar(kl));
        let gl = g_loss(&mut g, v[1], kl, 1.0).unwrap();
        let adversarial = (1.0 - df.clamp(1e-7, 1.0 - 1e-7)).ln();
        prop_assert!(g.value(gl).item().unwrap() >= adversarial - 1e-12);
    }

    #[test]
    fn sqrt_reconstructs_psd(d in 1usize..8, values in prop::collection::vec(-2.0f64..2.0, 64)) {
        let b = random_matrix(d, d, &values);
        let a = &b * b.transpose();
        let s = matrix_sqrt_psd(&a).unwrap();
        let err = (&s * &s - &a).norm();
        prop_assert!(err <= 1e-8 * a.norm().max(1e-300), "relative error {}", err / a.norm());
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(d in 1usize..6, x in prop::collection::vec(-2.0f64..2.0, 40), y in prop::collection::vec(-2.0f64..2.0, 40)) {
        let (a, b) = (gaussian(d, &x), gaussian(d, &y));
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(fid(&a, &a).unwrap() <= 1e-8);
        prop_assert!(fid_unclamped(&a, &a).unwrap() > -1e-6);
    }

    #[test]
    fn inception_score_lies_in_one_to_c(c in 2usize..8, logits in prop::collection::vec(-6.0f64..6.0, 20 * 8)) {
        let n = 20;
        let probs = DMatrix::from_fn(n, c, |i, j| logits[i * 8 + j].exp());
        let probs = DMatrix::from_fn(n, c, |i, j| probs[(i, j)] / probs.row(i).sum());
        let (mean, std) = inception_score(&probs, 10).unwrap();
        prop_assert!(mean >= 1.0 - 1e-12 && mean <= c as f64 + 1e-9);
        prop_assert!(std >= 0.0);
    }

    #[test]
    fn adam_step_is_bounded(grads in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 4), 1..20), lr in 1e-5f64..1e-1) {
        let cfg = AdamConfig::default();
        let mut store = ParamStore::<f64>::new();
        let id = store.add_trainable("p", Tensor::zeros([4]));
        let mut adam = Adam::new(cfg);
        for grad in &grads {
            let before = store.value(id).clone();
            let mut g = Graph::new();
            let p = g.param(&store, id, true);
            let w = g.constant(Tensor::new([4], grad.clone()).unwrap());
            let prod = g.mul(p, w).unwrap();
            let loss = g.sum(prod).unwrap();
            g.backward(loss).unwrap();
            store.absorb(&g);
            adam.step(&mut store, lr).unwrap();
            for (a, b) in store.value(id).data().iter().zip(before.data()) {
                prop_assert!((a - b).abs() <= lr / (1.0 - cfg.beta1) + 1e-15);
            }
        }
    }
}
