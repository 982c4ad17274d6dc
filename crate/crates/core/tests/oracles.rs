//! Checks against independently computed reference values.

use ndarray::{s, Array2, Axis};
use qvla_core::calibration::{build_table, robust_peak, single_bucket_table, TraceBuffer};
use qvla_core::gptq::HessianAccumulator;
use qvla_core::rotation::{make_hadamard, zigzag_permutation, RotationKind, RotationPlan};
use qvla_core::tensor::{decode_container, encode_container, Tensor, TensorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((r, c), || rng.sample::<f32, _>(StandardNormal))
}

/// Singular values of `a` from cyclic Jacobi eigen-decomposition of `a·aᵀ`, descending.
fn jacobi_singular_values(a: &Array2<f32>) -> Vec<f64> {
    let a = a.mapv(f64::from);
    let mut g = a.dot(&a.t());
    let n = g.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| g[[i, j]].powi(2)).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if g[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (g[[q, q]] - g[[p, p]]) / (2.0 * g[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (gkp, gkq) = (g[[k, p]], g[[k, q]]);
                    g[[k, p]] = c * gkp - s * gkq;
                    g[[k, q]] = s * gkp + c * gkq;
                }
                for k in 0..n {
                    let (gpk, gqk) = (g[[p, k]], g[[q, k]]);
                    g[[p, k]] = c * gpk - s * gqk;
                    g[[q, k]] = s * gpk + c * gqk;
                }
            }
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|i| g[[i, i]].max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn sorted_desc(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn assert_rel_close(got: &[f64], want: &[f64], tol: f64) {
    let scale = want.iter().copied().fold(0.0, f64::max);
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= tol * scale.max(1e-30), "got {g}, oracle {w}");
    }
}

#[test]
fn svd_rows_match_oracle_on_skewed_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut w = randn(&mut rng, 8, 16);
    w.row_mut(2).mapv_inplace(|v| v * 50.0);
    let plan = RotationPlan::build(w.view(), RotationKind::Svd, 8).unwrap();
    let wr = plan.apply_to_weight(w.view()).unwrap();
    let got = sorted_desc(wr.rows().into_iter().map(|r| r.dot(&r).sqrt() as f64));
    assert_rel_close(&got, &jacobi_singular_values(&w), 1e-4);
}

#[test]
fn svd_rows_match_oracle_per_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = randn(&mut rng, 128, 48);
    let plan = RotationPlan::build(w.view(), RotationKind::Svd, 64).unwrap();
    let wr = plan.apply_to_weight(w.view()).unwrap();
    let permuted = w.select(Axis(0), plan.perm());
    for b in 0..2 {
        let rows = wr.slice(s![b * 64..(b + 1) * 64, ..]);
        let got = sorted_desc(rows.rows().into_iter().map(|r| r.dot(&r).sqrt() as f64));
        let oracle = jacobi_singular_values(&permuted.slice(s![b * 64..(b + 1) * 64, ..]).to_owned());
        // a 64×48 block has 16 zero singular values
        assert_rel_close(&got, &oracle, 1e-4);
    }
}

#[test]
fn hadamard_is_orthogonal_and_sylvester() {
    let h = make_hadamard(64).unwrap();
    let e = h.dot(&h.t()) - Array2::<f32>::eye(64);
    assert!(e.iter().all(|v| v.abs() < 1e-6));
    let h2 = make_hadamard(2).unwrap();
    let r = std::f32::consts::FRAC_1_SQRT_2;
    assert_eq!(h2, ndarray::arr2(&[[r, r], [r, -r]]));
}

#[test]
fn zigzag_balances_example() {
    let norms = [9.0, 1.0, 8.0, 2.0, 7.0, 3.0, 6.0, 4.0];
    let perm = zigzag_permutation(&norms, 2).unwrap();
    let block = |b: usize| {
        let mut v: Vec<f32> = perm[b * 4..(b + 1) * 4].iter().map(|&i| norms[i]).collect();
        v.sort_by(f32::total_cmp);
        v
    };
    assert_eq!(block(0), vec![1.0, 4.0, 6.0, 9.0]);
    assert_eq!(block(1), vec![2.0, 3.0, 7.0, 8.0]);
}

#[test]
fn hessian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let parts: Vec<Array2<f32>> = (0..4).map(|i| randn(&mut rng, 5 + i, 12)).collect();
    let mut acc = HessianAccumulator::new(12);
    for p in &parts {
        acc.add(p.view()).unwrap();
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).unwrap().mapv(f64::from);
    let mut brute = Array2::<f64>::zeros((12, 12));
    for i in 0..12 {
        for j in 0..12 {
            brute[[i, j]] = 2.0 * (0..x.nrows()).map(|t| x[[t, i]] * x[[t, j]]).sum::<f64>();
        }
    }
    let h = acc.hessian();
    assert!(h.iter().zip(brute.iter()).all(|(a, b)| (a - b).abs() < 1e-5));
    assert!(h.iter().zip(h.t().iter()).all(|(a, b)| (a - b).abs() < 1e-5));
    assert_eq!(acc.samples(), x.nrows());
}

#[test]
fn one_hot_hessian() {
    let mut x = Array2::<f32>::zeros((1, 4));
    x[[0, 2]] = 1.0;
    let mut acc = HessianAccumulator::new(4);
    acc.add(x.view()).unwrap();
    let mut want = Array2::<f64>::zeros((4, 4));
    want[[2, 2]] = 2.0;
    assert_eq!(acc.hessian(), &want);
}

#[test]
fn interpolated_percentile() {
    let samples: Vec<f32> = (1..=1000).map(|v| v as f32).collect();
    let p = robust_peak(&samples, 99.9).unwrap();
    assert!((p - 999.001).abs() < 1e-3, "{p}");
    assert_eq!(robust_peak(&[0.5, -2.0, 1.0, 100.0], 100.0).unwrap(), 100.0);
    assert_eq!(robust_peak(&[3.0; 17], 37.0).unwrap(), 3.0);
}

#[test]
fn twenty_percent_decay_gives_ratio_near_one_point_two_five() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let base = randn(&mut rng, 4000, 6);
    let mut traces = TraceBuffer::new();
    for t in 0..8 {
        let g = 1.0 - 0.2 * t as f32 / 7.0;
        traces.push("dit.q0", t, (&base * g).view()).unwrap();
    }
    let table = build_table(&traces, 99.9, 7).unwrap();
    for j in 0..6 {
        let r = table.scales("dit.q0", 0).unwrap()[j] / table.scales("dit.q0", 7).unwrap()[j];
        assert!((r / 1.25 - 1.0).abs() < 0.05, "channel {j}: {r}");
    }
    // constant traces: the bucket equals every step
    let mut flat = TraceBuffer::new();
    for t in 0..3 {
        flat.push("dit.k0", t, base.view()).unwrap();
    }
    let per_step = build_table(&flat, 99.9, 7).unwrap();
    let bucket = single_bucket_table(&flat, 99.9, 7).unwrap();
    for t in 0..3 {
        let (a, b) = (per_step.scales("dit.k0", t).unwrap(), bucket.scales("dit.k0", t).unwrap());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs()));
    }
}

#[test]
fn hundred_random_tensors_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut map = TensorMap::new();
    for i in 0..100 {
        let r = rng.gen_range(1..6);
        let c = rng.gen_range(1..9);
        let name = format!("t{i:03}");
        let t = match i % 3 {
            0 => Tensor::f32(&name, vec![r, c], (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap(),
            1 => {
                let v: Vec<i8> = (0..r * c).map(|_| rng.gen_range(-7..=7)).collect();
                Tensor::packed_i4(&name, vec![r, c], &v).unwrap()
            }
            _ => Tensor::bytes(&name, (0..r * c).map(|_| rng.gen()).collect()).unwrap(),
        };
        map.insert(name, t);
    }
    let bytes = encode_container(&map).unwrap();
    let back = decode_container(&bytes).unwrap();
    assert_eq!(back, map);
    assert_eq!(encode_container(&back).unwrap(), bytes);
}
