use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsepose::voxel::VoxelIndex;
use sparsepose_nn::attention::{attention_weights, window_attention};
use sparsepose_nn::conv::subm_conv;
use sparsepose_nn::gradcheck::{gradient_error, random_tensor};
use sparsepose_nn::{AttentionConfig, Graph, Rulebook, SubmConv, Tensor};
use sparsepose_nn::ParamStore;

fn voxel_set() -> impl Strategy<Value = Vec<VoxelIndex>> {
    prop::collection::btree_set(prop::array::uniform3(-6i32..6), 1..60).prop_map(|s: BTreeSet<VoxelIndex>| s.into_iter().collect())
}

fn run_attention(q: &Tensor, k: &Tensor, v: &Tensor, windows: Vec<Vec<usize>>, heads: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let (a, b, c) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let z = window_attention(&mut g, a, b, c, Arc::new(windows), heads, true).unwrap();
    g.value(z).data().to_vec()
}

proptest! {
    #[test]
    fn attention_rows_are_distributions(n in 1usize..24, heads in 1usize..4, dim in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = heads * dim;
        let (q, k) = (random_tensor(&mut rng, &[n, c]), random_tensor(&mut rng, &[n, c]));
        let rows: Vec<usize> = (0..n).collect();
        let w = attention_weights(&q, &k, &rows, heads, true);
        prop_assert_eq!(w.len(), heads * n * n);
        for row in w.chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn attention_is_equivariant_to_row_order_within_a_window(
        n in 1usize..20, heads in 1usize..3, seed in any::<u64>(), perm_seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = heads * 2;
        let (q, k, v) = (random_tensor(&mut rng, &[n, c]), random_tensor(&mut rng, &[n, c]), random_tensor(&mut rng, &[n, c]));
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let base = run_attention(&q, &k, &v, vec![(0..n).collect()], heads);
        let permuted = run_attention(&q, &k, &v, vec![order.clone()], heads);
        prop_assert!(base.iter().zip(&permuted).all(|(a, b)| (a - b).abs() < 1e-13));

        // physically permuting the rows permutes the outputs the same way
        let gather = |t: &Tensor| Tensor::matrix(n, c, order.iter().flat_map(|&r| t.row(r).to_vec()).collect()).unwrap();
        let moved = run_attention(&gather(&q), &gather(&k), &gather(&v), vec![(0..n).collect()], heads);
        for (i, &r) in order.iter().enumerate() {
            for j in 0..c {
                prop_assert!((moved[i * c + j] - base[r * c + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn submanifold_conv_keeps_the_active_set(idx in voxel_set(), cin in 1usize..4, cout in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = idx.len();
        let rules = Arc::new(Rulebook::new(&idx));
        prop_assert_eq!(rules.len(), n);
        for r in 0..n {
            for tap in 0..27 {
                if let Some(nb) = rules.neighbor(r, tap) {
                    prop_assert!(nb < n);
                }
            }
        }
        let mut store = ParamStore::new();
        let conv = SubmConv::new(&mut store, &mut rng, "c", cin, cout).unwrap();
        let conv2 = SubmConv::new(&mut store, &mut rng, "c2", cout, cout).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(random_tensor(&mut rng, &[n, cin]));
        let y = conv.forward(&mut g, &p, x, rules.clone()).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[n, cout][..]);
        let y2 = conv2.forward(&mut g, &p, y, rules).unwrap();
        prop_assert_eq!(g.value(y2).rows(), n);
    }

    #[test]
    fn channels_must_split_evenly_into_heads(channels in 1usize..64, heads in 1usize..9) {
        let cfg = AttentionConfig::new(channels, heads, 4, 8);
        prop_assert_eq!(cfg.is_ok(), channels % heads == 0);
        if let Ok(c) = cfg {
            prop_assert_eq!(c.head_dim() * heads, channels);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sparse_ops_pass_gradient_checks(idx in voxel_set(), heads in 1usize..3, seed in any::<u64>()) {
        let idx: Vec<VoxelIndex> = idx.into_iter().take(12).collect();
        let n = idx.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rules = Arc::new(Rulebook::new(&idx));
        let inputs = vec![random_tensor(&mut rng, &[n, 2]), random_tensor(&mut rng, &[27 * 2, 2]), random_tensor(&mut rng, &[n, 2])];
        let err = gradient_error(&inputs, |g, v| {
            let y = subm_conv(g, v[0], v[1], rules.clone())?;
            let y = g.mul(y, v[2])?;
            Ok(g.sum(y))
        }).unwrap();
        prop_assert!(err < 1e-4, "conv {:e}", err);

        let c = 2 * heads;
        let windows = Arc::new(sparsepose::voxel::partition_windows(&idx, 2).unwrap().into_iter().map(|w| w.rows).collect::<Vec<_>>());
        let att: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[n, c])).collect();
        let err = gradient_error(&att, |g, v| {
            let z = window_attention(g, v[0], v[1], v[2], windows.clone(), heads, true)?;
            let z = g.mul(z, v[3])?;
            Ok(g.sum(z))
        }).unwrap();
        prop_assert!(err < 1e-4, "attention {:e}", err);
    }
}
