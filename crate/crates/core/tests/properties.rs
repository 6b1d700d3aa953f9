use cscl_core::loss::{cscl_loss_lambda, cscl_loss_margin};
use cscl_core::metrics::{boundary_mask, confusion, metrics, upscale_nearest, Region};
use cscl_core::synth::downsample_majority;
use cscl_core::window::window_gather;
use cscl_core::{LabelMap, Tensor, WindowConfig};
use proptest::prelude::*;

fn grid(max_side: usize, classes: i32) -> impl Strategy<Value = Tensor<i32>> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        prop::collection::vec(0..classes, h * w).prop_map(move |v| Tensor::from_vec(&[h, w], v).unwrap())
    })
}

/// Same-shaped S, L and M with at least one active entry.
fn pair_problem() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<bool>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0..1.0f64, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
            .prop_map(|(s, l, mut m, k)| {
                m[k] = true;
                (s, l, m)
            })
    })
}

fn t<T: cscl_core::Element>(v: &[T]) -> Tensor<T> {
    Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
}

fn flip_grid(g: &Tensor<i32>, vertical: bool, horizontal: bool) -> Tensor<i32> {
    let (h, w) = (g.shape()[0], g.shape()[1]);
    Tensor::from_fn(&[h, w], |p| {
        let (i, j) = (p / w, p % w);
        let si = if vertical { h - 1 - i } else { i };
        let sj = if horizontal { w - 1 - j } else { j };
        g.get(&[si, sj])
    })
}

proptest! {
    #[test]
    fn unit_window_is_identity(h in 1usize..8, w in 1usize..8, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = cscl_core::Rng::new(seed, 0);
        let x = Tensor::<f64>::from_fn(&[h, w, d], |_| rng.normal());
        let (g, pad) = window_gather(&x, &WindowConfig::new(1, 1, 1)).unwrap();
        prop_assert_eq!(g.shape(), &[h, w, 1, 1, d][..]);
        prop_assert_eq!(g.data(), x.data());
        prop_assert!(pad.data().iter().all(|&p| !p));
    }

    #[test]
    fn lambda_loss_is_linear_in_s((s, l, m) in pair_problem(), a in -3.0..3.0f64, lambda in 0.0..2.0f64) {
        let s2: Vec<f64> = s.iter().rev().copied().collect();
        let mix: Vec<f64> = s.iter().zip(&s2).map(|(x, y)| a * x + y).collect();
        let f = |v: &[f64]| cscl_loss_lambda(&t(v), &t(&l), &t(&m), lambda).unwrap();
        prop_assert!((f(&mix) - (a * f(&s) + f(&s2))).abs() < 1e-9);
    }

    #[test]
    fn losses_ignore_entry_order((s, l, m) in pair_problem(), shift in 0usize..40) {
        let n = s.len();
        let rot = |v: &[f64]| (0..n).map(|i| v[(i + shift) % n]).collect::<Vec<_>>();
        let rotb = |v: &[bool]| (0..n).map(|i| v[(i + shift) % n]).collect::<Vec<_>>();
        let (sr, lr, mr) = (rot(&s), rotb(&l), rotb(&m));
        let a = cscl_loss_lambda(&t(&s), &t(&l), &t(&m), 0.125).unwrap();
        let b = cscl_loss_lambda(&t(&sr), &t(&lr), &t(&mr), 0.125).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let a = cscl_loss_margin(&t(&s), &t(&l), &t(&m), 0.2).unwrap();
        let b = cscl_loss_margin(&t(&sr), &t(&lr), &t(&mr), 0.2).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_do_not_matter((s, l, m) in pair_problem(), junk in -5.0..5.0f64) {
        let s2: Vec<f64> = s.iter().zip(&m).map(|(&v, &on)| if on { v } else { junk }).collect();
        let l2: Vec<bool> = l.iter().zip(&m).map(|(&v, &on)| if on { v } else { !v }).collect();
        let a = cscl_loss_lambda(&t(&s), &t(&l), &t(&m), 0.5).unwrap();
        let b = cscl_loss_lambda(&t(&s2), &t(&l2), &t(&m), 0.5).unwrap();
        prop_assert_eq!(a, b);
        let a = cscl_loss_margin(&t(&s), &t(&l), &t(&m), 0.0).unwrap();
        let b = cscl_loss_margin(&t(&s2), &t(&l2), &t(&m), 0.0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_ignore_class_naming(truth in grid(8, 3), noise in prop::collection::vec(0..3i32, 64), perm in Just(vec![0, 1, 2]).prop_shuffle()) {
        let (h, w) = (truth.shape()[0], truth.shape()[1]);
        let pred = Tensor::from_fn(&[h, w], |p| if noise[p] == 0 { (truth.data()[p] + 1) % 3 } else { truth.data()[p] });
        let rename = |g: &Tensor<i32>| g.map(|c| perm[c as usize]);
        let a = metrics(&confusion(&pred, &LabelMap::new(truth.clone(), 3).unwrap(), Region::All).unwrap()).unwrap();
        let b = metrics(&confusion(&rename(&pred), &LabelMap::new(rename(&truth), 3).unwrap(), Region::All).unwrap()).unwrap();
        prop_assert!((a.overall_acc - b.overall_acc).abs() < 1e-12);
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
    }

    #[test]
    fn boundary_and_interior_partition_all(truth in grid(10, 3), noise in prop::collection::vec(0..3i32, 100)) {
        let pred = Tensor::from_fn(truth.shape(), |p| noise[p]);
        let labels = LabelMap::new(truth, 3).unwrap();
        let all = confusion(&pred, &labels, Region::All).unwrap();
        let mut parts = confusion(&pred, &labels, Region::Boundary).unwrap();
        parts.merge(&confusion(&pred, &labels, Region::Interior).unwrap());
        prop_assert_eq!(all, parts);
    }

    #[test]
    fn boundary_commutes_with_flips(g in grid(10, 4), v in any::<bool>(), hz in any::<bool>()) {
        let b = boundary_mask(&LabelMap::new(g.clone(), 4).unwrap());
        let bf = boundary_mask(&LabelMap::new(flip_grid(&g, v, hz), 4).unwrap());
        let (h, w) = (g.shape()[0], g.shape()[1]);
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = (if v { h - 1 - i } else { i }, if hz { w - 1 - j } else { j });
                prop_assert_eq!(bf.get(&[i, j]), b.get(&[si, sj]));
            }
        }
    }

    #[test]
    fn downsampling_inverts_upscaling(g in grid(8, 5), f in prop::sample::select(vec![1usize, 2, 4])) {
        let up = upscale_nearest(&g, f).unwrap();
        prop_assert_eq!(up.shape(), &[g.shape()[0] * f, g.shape()[1] * f][..]);
        prop_assert_eq!(downsample_majority(&up, f).unwrap(), g);
    }
}
