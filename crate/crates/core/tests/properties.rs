//! Randomised invariants of the estimation, segmentation, transform, forecasting
//! and metric code. Every oracle here is written independently of the library.

use std::collections::BTreeSet;

use matseg::estimation::{estimate_transforms, w_estimate, w_estimate_naive, EigTransform, Mode};
use matseg::forecasting::{fit_ar1, fit_mar1, fit_var1, Coefficients};
use matseg::matcore::{center, max_abs, MatrixSeries};
use matseg::segmentation::{group_columns, ratio_select, Partition};
use matseg::simgen::{classify_segmentation, metric_d, metric_d1, SegClass};
use matseg::transform::{from_latent, to_latent, TransformPair};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Orthogonal times a diagonal in `[1, 3]`, so the condition number stays below 3.
fn mixing(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let scales = DVector::from_fn(d, |_, _| rng.random_range(1.0..3.0));
    orthogonal(rng, d) * DMatrix::from_diagonal(&scales)
}

/// A mixed, serially dependent series: `X_t = B U_t Aᵀ` with `U_t = 0.5 U_{t−1} + E_t`.
fn series(seed: u64, p: usize, q: usize, t: usize) -> MatrixSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = mixing(&mut rng, q);
    let b = mixing(&mut rng, p);
    let mut u = DMatrix::zeros(p, q);
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        u = u * 0.5 + gauss(&mut rng, p, q);
        out.push(&b * &u * a.transpose());
    }
    MatrixSeries::new(out).unwrap()
}

fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    gauss(rng, d, d).qr().q()
}

fn sym_gap(w: &DMatrix<f64>) -> f64 {
    max_abs(&(w - w.transpose()))
}

fn canonical(groups: &[Vec<usize>]) -> BTreeSet<BTreeSet<usize>> {
    groups.iter().map(|g| g.iter().copied().collect()).collect()
}

/// Reachability by repeated boolean squaring, then classes of mutually reachable nodes.
fn closure_oracle(d: usize, edges: &[(usize, usize)]) -> BTreeSet<BTreeSet<usize>> {
    let mut reach = vec![vec![false; d]; d];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b) in edges {
        reach[a][b] = true;
        reach[b][a] = true;
    }
    for k in 0..d {
        for i in 0..d {
            for j in 0..d {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    (0..d).map(|i| (0..d).filter(|&j| reach[i][j]).collect()).collect()
}

fn random_partition(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<usize>> {
    let mut labels: Vec<usize> = (0..d).map(|_| rng.random_range(0..d)).collect();
    // relabel to consecutive ids so empty labels vanish
    let mut seen = Vec::new();
    for l in labels.iter_mut() {
        let id = match seen.iter().position(|s| s == l) {
            Some(i) => i,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        };
        *l = id;
    }
    let mut groups = vec![Vec::new(); seen.len()];
    for (k, l) in labels.into_iter().enumerate() {
        groups[l].push(k);
    }
    groups
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn w_is_symmetric_and_psd(seed in any::<u64>(), p in 1usize..=8, q in 1usize..=8, t in 20usize..=200) {
        let (x, _) = center(&series(seed, p, q, t));
        for mode in [Mode::Columns, Mode::Rows] {
            let w = w_estimate(&x, mode, 5, EigTransform::Identity).unwrap().w;
            let scale = max_abs(&w);
            prop_assert!(sym_gap(&w) <= 1e-8 * scale);
            let eig = w.clone().symmetric_eigen().eigenvalues;
            let (lo, hi) = (eig.min(), eig.max());
            prop_assert!(lo >= -1e-8 * hi.max(0.0), "min eigenvalue {lo} against {hi}");
        }
    }

    #[test]
    fn naive_and_stacked_w_agree(seed in any::<u64>(), p in 1usize..=8, q in 1usize..=8, t in 20usize..=200, tau0 in 1usize..=5) {
        let (x, _) = center(&series(seed, p, q, t));
        for mode in [Mode::Columns, Mode::Rows] {
            let fast = w_estimate(&x, mode, tau0, EigTransform::Identity).unwrap().w;
            let slow = w_estimate_naive(&x, mode, tau0, EigTransform::Identity).unwrap().w;
            prop_assert!(max_abs(&(&fast - &slow)) <= 1e-8 * max_abs(&slow).max(1.0));
        }
    }

    #[test]
    fn w_ignores_permutations_of_the_other_mode(seed in any::<u64>(), p in 2usize..=8, q in 2usize..=8, t in 20usize..=120) {
        let x = series(seed, p, q, t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut rows: Vec<usize> = (0..p).collect();
        let mut cols: Vec<usize> = (0..q).collect();
        for i in (1..p).rev() { rows.swap(i, rng.random_range(0..=i)); }
        for i in (1..q).rev() { cols.swap(i, rng.random_range(0..=i)); }
        let xr = x.map(|m| m.select_rows(&rows)).unwrap();
        let xc = x.map(|m| m.select_columns(&cols)).unwrap();
        let w = w_estimate(&x, Mode::Columns, 5, EigTransform::Identity).unwrap().w;
        let wr = w_estimate(&xr, Mode::Columns, 5, EigTransform::Identity).unwrap().w;
        prop_assert!(max_abs(&(&w - &wr)) <= 1e-10 * max_abs(&w).max(1.0));
        let v = w_estimate(&x, Mode::Rows, 5, EigTransform::Identity).unwrap().w;
        let vc = w_estimate(&xc, Mode::Rows, 5, EigTransform::Identity).unwrap().w;
        prop_assert!(max_abs(&(&v - &vc)) <= 1e-10 * max_abs(&v).max(1.0));
    }

    #[test]
    fn latent_round_trip(seed in any::<u64>(), p in 1usize..=6, q in 1usize..=6, t in 40usize..=150) {
        let x = series(seed, p, q, t);
        let (xc, mean) = center(&x);
        let (cw, rw) = estimate_transforms(&xc, 5, EigTransform::Identity).unwrap();
        let pair = TransformPair::from_partitions(&cw, &rw, &Partition::singletons(q), &Partition::singletons(p), mean).unwrap();
        let back = from_latent(&to_latent(&xc, &pair).unwrap(), &pair).unwrap();
        let scale = xc.iter().map(max_abs).fold(0.0, f64::max);
        for (a, b) in back.iter().zip(xc.iter()) {
            prop_assert!(max_abs(&(a - b)) <= 1e-6 * scale);
        }
    }

    #[test]
    fn metric_d_vanishes_on_signed_permutations(seed in any::<u64>(), q in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = orthogonal(&mut rng, q);
        let mut perm: Vec<usize> = (0..q).collect();
        for i in (1..q).rev() { perm.swap(i, rng.random_range(0..=i)); }
        let mut pa = a.select_columns(&perm);
        for j in 0..q {
            if rng.random_bool(0.5) { pa.column_mut(j).neg_mut(); }
        }
        prop_assert!(metric_d(&pa, &a).unwrap().abs() <= 1e-12);
        let other = orthogonal(&mut rng, q);
        let d = metric_d(&other, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn metric_d1_ignores_rotations_within_blocks(seed in any::<u64>(), sizes in proptest::collection::vec(1usize..=3, 1..=4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: usize = sizes.iter().sum();
        let a = orthogonal(&mut rng, d);
        let b = orthogonal(&mut rng, d);
        let mut start = 0;
        let (mut ab, mut bb, mut rot) = (Vec::new(), Vec::new(), Vec::new());
        for &s in &sizes {
            let ai = a.columns(start, s).into_owned();
            ab.push(ai.clone());
            bb.push(b.columns(start, s).into_owned());
            rot.push(ai * orthogonal(&mut rng, s));
            start += s;
        }
        let base = metric_d1(&bb, &ab).unwrap();
        prop_assert!((metric_d1(&bb, &rot).unwrap() - base).abs() <= 1e-10);
        prop_assert!(metric_d1(&rot, &ab).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn grouping_matches_transitive_closure(d in 1usize..=10, raw in proptest::collection::vec((0usize..10, 0usize..10), 0..15)) {
        let edges: Vec<(usize, usize)> = raw.into_iter().map(|(a, b)| (a % d, b % d)).collect();
        let part = group_columns(d, &edges);
        prop_assert_eq!(canonical(&part.groups), closure_oracle(d, &edges));
        let mut rev = edges.clone();
        rev.reverse();
        rev.extend(edges.iter().copied());
        prop_assert_eq!(group_columns(d, &rev), part);
    }

    #[test]
    fn ratio_select_is_first_argmax(raw in proptest::collection::vec(0.001f64..1.0, 2..40), c_r in 0.05f64..0.95) {
        let mut rho = raw;
        rho.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let q0 = rho.len();
        let jmax = ((c_r * q0 as f64).floor() as usize).min(q0 - 1);
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 1..=jmax {
            let r = rho[j - 1] / rho[j].max(1e-12);
            if r > best.1 { best = (j, r); }
        }
        let got = ratio_select(&rho, c_r).unwrap();
        prop_assert_eq!(got, best.0);
        prop_assert!(got <= jmax);
    }

    #[test]
    fn classification_follows_its_definition(seed in any::<u64>(), d in 2usize..=9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth_groups = random_partition(&mut rng, d);
        let truth = Partition::from_groups(d, &truth_groups).unwrap();
        prop_assert_eq!(classify_segmentation(&truth, &truth), SegClass::Correct);
        if truth_groups.len() >= 2 {
            let (i, j) = (0, truth_groups.len() - 1);
            let mut merged: Vec<Vec<usize>> = truth_groups.iter().enumerate()
                .filter(|(k, _)| *k != i && *k != j).map(|(_, g)| g.clone()).collect();
            merged.push(truth_groups[i].iter().chain(&truth_groups[j]).copied().collect());
            let m = Partition::from_groups(d, &merged).unwrap();
            prop_assert_eq!(classify_segmentation(&m, &truth), SegClass::Merging);
            prop_assert_eq!(classify_segmentation(&truth, &m), SegClass::Splitting);
        }
        let other = Partition::from_groups(d, &random_partition(&mut rng, d)).unwrap();
        let (f, t) = (canonical(&other.groups), canonical(&truth.groups));
        let class = classify_segmentation(&other, &truth);
        prop_assert_eq!(class == SegClass::Correct, f == t);
        // a merge removes exactly one group and every found group is a union of true ones
        if class == SegClass::Merging {
            prop_assert_eq!(f.len() + 1, t.len());
            prop_assert!(t.iter().all(|g| f.iter().any(|h| g.is_subset(h))));
        }
        if class == SegClass::Splitting {
            prop_assert_eq!(t.len() + 1, f.len());
            prop_assert!(f.iter().all(|g| t.iter().any(|h| g.is_subset(h))));
        }
    }

    #[test]
    fn mar1_objective_never_increases(seed in any::<u64>(), r in 2usize..=4, c in 2usize..=4, t in 30usize..=150) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = orthogonal(&mut rng, r) * 0.7;
        let p2 = orthogonal(&mut rng, c) * 0.9;
        let mut u = DMatrix::zeros(r, c);
        let mut v = Vec::with_capacity(t);
        for _ in 0..t {
            u = &p1 * &u * p2.transpose() + gauss(&mut rng, r, c);
            v.push(u.clone());
        }
        let model = fit_mar1(&MatrixSeries::new(v).unwrap()).unwrap();
        for w in model.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn one_dimensional_var_is_ar(seed in any::<u64>(), t in 10usize..=300, phi in -0.95f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = vec![0.0; t];
        for i in 1..t {
            z[i] = phi * z[i - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let ar = fit_ar1(&z).unwrap();
        let var = fit_var1(&z.iter().map(|v| DVector::from_element(1, *v)).collect::<Vec<_>>()).unwrap();
        let (Coefficients::Ar1 { phi: a }, Coefficients::Var1 { phi: b }) = (&ar.coeffs, &var.coeffs) else {
            return Err(TestCaseError::fail(format!("kinds {:?} and {:?}", ar.kind, var.kind)));
        };
        prop_assert_eq!(b.shape(), (1, 1));
        prop_assert_eq!(*a, b[(0, 0)]);
        prop_assert_eq!(&ar.intercept, &var.intercept);
    }
}

#[test]
fn metric_d_is_one_for_a_hadamard_rotation() {
    let h = DMatrix::from_row_slice(
        4,
        4,
        &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0],
    ) / 2.0;
    let d = metric_d(&h, &DMatrix::identity(4, 4)).unwrap();
    assert!((d - 1.0).abs() < 1e-12, "D = {d}");
}

#[test]
fn ratio_tie_goes_to_smallest_index() {
    assert_eq!(ratio_select(&[0.5, 0.25, 0.125, 0.0625], 0.75).unwrap(), 1);
}
