use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{MgcotError, Result};

/// Mean softmax cross-entropy of `scores` (`B x N`, column `j` is item
/// `j + 1`) against 1-based item labels.
pub fn main_loss(g: &mut Graph, scores: Var, labels: &[u32]) -> Result<Var> {
    let n = g.shape(scores).1;
    let cols = labels
        .iter()
        .map(|&l| {
            if l == 0 || l as usize > n {
                Err(MgcotError::Shape(format!("label {l} outside 1..={n}")))
            } else {
                Ok(l as usize - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    g.cross_entropy(scores, &cols)
}

/// Rotation by a random offset in `1..n`: a permutation without fixed points.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(MgcotError::NoDerangement(n));
    }
    let offset = rng.random_range(1..n);
    Ok((0..n).map(|i| (i + offset) % n).collect())
}

/// `mean_i [ softplus(-Sim_p/τ) + softplus(Sim_n/τ) ]`, i.e.
/// `-ln σ(Sim_p/τ) - ln σ(-Sim_n/τ)`, with negatives paired by `perm`.
pub fn contrastive_loss_with(g: &mut Graph, local: Var, global: Var, tau: f64, perm: &[usize]) -> Result<Var> {
    let (b, w) = g.shape(local);
    if g.shape(global) != (b, w) || perm.len() != b {
        return Err(MgcotError::Shape(format!(
            "contrastive views {:?} and {:?} with {} pairings",
            g.shape(local),
            g.shape(global),
            perm.len()
        )));
    }
    if b < 2 {
        return Err(MgcotError::NoDerangement(b));
    }
    let pos = g.mul(local, global)?;
    let pos = g.row_sum(pos);
    let shuffled = g.gather_rows(global, perm)?;
    let neg = g.mul(local, shuffled)?;
    let neg = g.row_sum(neg);
    let pos = g.scale(pos, -1.0 / tau);
    let neg = g.scale(neg, 1.0 / tau);
    let lp = g.softplus(pos);
    let ln = g.softplus(neg);
    let sum = g.add(lp, ln)?;
    Ok(g.mean(sum))
}

/// Contrastive loss with a freshly drawn derangement; returns the pairing.
pub fn contrastive_loss(
    g: &mut Graph,
    local: Var,
    global: Var,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<usize>)> {
    let perm = derangement(g.shape(local).0, rng)?;
    let loss = contrastive_loss_with(g, local, global, tau, &perm)?;
    Ok((loss, perm))
}

/// `main + β · contrastive`; with β = 0 the contrastive term is dropped.
pub fn total_loss(g: &mut Graph, main: Var, contrastive: Option<Var>, beta: f64) -> Result<Var> {
    if beta < 0.0 {
        return Err(MgcotError::Config(format!("β must be non-negative, got {beta}")));
    }
    match contrastive {
        Some(c) if beta > 0.0 => {
            let c = g.scale(c, beta);
            g.add(main, c)
        }
        _ => Ok(main),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradients;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn scalar_ce(scores: &Array2<f64>, labels: &[u32]) -> f64 {
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = scores.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for &x in row.iter() {
                s += (x - max).exp();
            }
            total += max + s.ln() - row[l as usize - 1];
        }
        total / labels.len() as f64
    }

    #[test]
    fn uniform_scores_give_ln_n() {
        let mut g = Graph::new();
        let s = g.input(Array2::from_elem((3, 100), 0.7));
        let l = main_loss(&mut g, s, &[1, 50, 100]).unwrap();
        assert!((g.scalar(l) - 100f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let mut g = Graph::new();
        let mut v = Array2::zeros((1, 10));
        v[[0, 3]] = 1e3;
        let s = g.input(v);
        let l = main_loss(&mut g, s, &[4]).unwrap();
        assert!(g.scalar(l) < 1e-12);
    }

    #[test]
    fn main_loss_matches_scalar_log_sum_exp() {
        let scores = random((4, 7), 1) * 5.0;
        let labels = [3, 1, 7, 5];
        let mut g = Graph::new();
        let s = g.input(scores.clone());
        let l = main_loss(&mut g, s, &labels).unwrap();
        assert!((g.scalar(l) - scalar_ce(&scores, &labels)).abs() < 1e-10);
    }

    #[test]
    fn lowering_the_label_score_raises_the_loss() {
        let base = random((1, 6), 2);
        let mut prev = scalar_ce(&base, &[2]);
        for step in 1..20 {
            let mut s = base.clone();
            s[[0, 1]] -= step as f64 * 0.1;
            let mut g = Graph::new();
            let v = g.input(s);
            let l = main_loss(&mut g, v, &[2]).unwrap();
            assert!(g.scalar(l) > prev);
            prev = g.scalar(l);
        }
    }

    #[test]
    fn zero_similarity_gives_two_ln_two() {
        let mut g = Graph::new();
        let a = g.input(Array2::zeros((4, 6)));
        let b = g.input(Array2::zeros((4, 6)));
        let (l, _) = contrastive_loss(&mut g, a, b, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((g.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn separated_views_drive_contrastive_loss_to_zero() {
        // Row i aligns with global row i and opposes the rotated partner.
        let local = array![[50.0, 0.0], [-50.0, 0.0]];
        let global = array![[50.0, 0.0], [-50.0, 0.0]];
        let mut g = Graph::new();
        let a = g.input(local);
        let b = g.input(global);
        let l = contrastive_loss_with(&mut g, a, b, 1.0, &[1, 0]).unwrap();
        assert!(g.scalar(l) < 1e-12);
    }

    #[test]
    fn contrastive_matches_scalar_oracle() {
        let local = random((4, 5), 3);
        let global = random((4, 5), 4);
        let mut g = Graph::new();
        let a = g.input(local.clone());
        let b = g.input(global.clone());
        let (l, perm) = contrastive_loss(&mut g, a, b, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(perm.iter().enumerate().all(|(i, &p)| p != i));
        let mut expected = 0.0;
        for i in 0..4 {
            let mut sp = 0.0;
            let mut sn = 0.0;
            for c in 0..5 {
                sp += local[[i, c]] * global[[i, c]];
                sn += local[[i, c]] * global[[perm[i], c]];
            }
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            expected += -sig(sp).ln() - sig(-sn).ln();
        }
        assert!((g.scalar(l) - expected / 4.0).abs() < 1e-10);
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in 2..40 {
            for _ in 0..10 {
                let p = derangement(n, &mut rng).unwrap();
                assert!(p.iter().enumerate().all(|(i, &x)| x != i));
                let mut sorted = p.clone();
                sorted.sort();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
        }
        assert!(matches!(derangement(1, &mut rng), Err(MgcotError::NoDerangement(1))));
    }

    #[test]
    fn batch_of_one_is_an_error() {
        let mut g = Graph::new();
        let a = g.input(Array2::zeros((1, 2)));
        let r = contrastive_loss(&mut g, a, a, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(MgcotError::NoDerangement(1))));
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut g = Graph::new();
        let m = g.input(array![[1.0]]);
        let c = g.input(array![[2.0]]);
        let t = total_loss(&mut g, m, Some(c), 5.0).unwrap();
        assert_eq!(g.scalar(t), 11.0);
        let t0 = total_loss(&mut g, m, Some(c), 0.0).unwrap();
        assert_eq!(t0, m);
        assert!(total_loss(&mut g, m, Some(c), -1.0).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let inputs = vec![random((3, 6), 7), random((3, 4), 8), random((3, 4), 9)];
        let worst = check_input_gradients(&inputs, 1e-5, |g, v| {
            let m = main_loss(g, v[0], &[2, 6, 1])?;
            let c = contrastive_loss_with(g, v[1], v[2], 0.7, &[2, 0, 1])?;
            total_loss(g, m, Some(c), 0.5)
        })
        .unwrap();
        assert!(worst < 1e-6, "relative error {worst}");
    }
}
