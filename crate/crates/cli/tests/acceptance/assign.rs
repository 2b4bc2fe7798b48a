use bezierformer::assign::{simota_assign, Assignment, CostMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

/// Every one-to-one matching that assigns `min(n_gt, n_q)` pairs, as
/// per-GT query choices.
fn all_matchings(n_gt: usize, n_q: usize) -> Vec<Vec<Option<usize>>> {
    fn rec(i: usize, n_gt: usize, n_q: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if i == n_gt {
            if cur.iter().flatten().count() == n_gt.min(n_q) {
                out.push(cur.clone());
            }
            return;
        }
        for j in 0..n_q {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                rec(i + 1, n_gt, n_q, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
        cur.push(None);
        rec(i + 1, n_gt, n_q, used, cur, out);
        cur.pop();
    }
    let mut out = Vec::new();
    rec(0, n_gt, n_q, &mut vec![false; n_q], &mut Vec::new(), &mut out);
    out
}

/// GT `i` strictly prefers query `a` to `b`: lower cost, then lower index.
fn gt_prefers(m: &CostMatrix, i: usize, a: usize, b: usize) -> bool {
    (m.get(i, a), a) < (m.get(i, b), b)
}

/// Query `j` strictly prefers GT `a` to `b`: lower cost, then lower index.
fn query_prefers(m: &CostMatrix, j: usize, a: usize, b: usize) -> bool {
    (m.get(a, j), a) < (m.get(b, j), b)
}

/// No GT would rather have a query that is free or held by a GT the query
/// ranks lower: the conflict rule has nothing left to resolve.
fn conflict_free(m: &CostMatrix, gt_to_pred: &[Option<usize>]) -> bool {
    let (n_gt, n_q) = (m.n_gt(), m.n_query());
    let mut holder = vec![None; n_q];
    for (i, q) in gt_to_pred.iter().enumerate() {
        if let Some(q) = q {
            holder[*q] = Some(i);
        }
    }
    for i in 0..n_gt {
        for j in 0..n_q {
            let wants = match gt_to_pred[i] {
                Some(mine) => gt_prefers(m, i, j, mine),
                None => true,
            };
            let wins = match holder[j] {
                None => true,
                Some(h) => h != i && query_prefers(m, j, i, h),
            };
            if wants && wins {
                return false;
            }
        }
    }
    true
}

/// Among conflict-free matchings, the one every GT likes at least as much
/// as any other; `None` when no single matching does.
fn enumeration_oracle(m: &CostMatrix) -> Option<Vec<Option<usize>>> {
    let stable: Vec<Vec<Option<usize>>> = all_matchings(m.n_gt(), m.n_query())
        .into_iter()
        .filter(|a| conflict_free(m, a))
        .collect();
    let rank = |i: usize, q: Option<usize>| q.map(|q| (0, m.get(i, q), q)).unwrap_or((1, 0.0, 0));
    stable
        .iter()
        .find(|cand| {
            stable.iter().all(|other| (0..m.n_gt()).all(|i| rank(i, cand[i]) <= rank(i, other[i])))
        })
        .cloned()
}

fn min_total_cost(m: &CostMatrix) -> Vec<Option<usize>> {
    let total = |a: &Vec<Option<usize>>| -> f64 { a.iter().enumerate().filter_map(|(i, q)| q.map(|q| m.get(i, q))).sum() };
    all_matchings(m.n_gt(), m.n_query())
        .into_iter()
        .min_by(|a, b| total(a).total_cmp(&total(b)))
        .expect("at least one matching")
}

fn random_matrix(rng: &mut ChaCha8Rng) -> CostMatrix {
    let (g, q) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let ties = rng.random_bool(0.3);
    let values = (0..g * q)
        .map(|_| if ties { rng.random_range(0..3) as f64 } else { rng.random_range(-5.0..5.0) })
        .collect();
    CostMatrix::new(g, q, values).expect("finite values")
}

pub fn simota() -> anyhow::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 3000;
    let (mut oracle_mismatch, mut no_oracle, mut cost_agree, mut cost_disagree_bad) = (0, 0, 0, 0);
    let (mut shift_bad, mut determinism_bad) = (0, 0);
    for _ in 0..trials {
        let m = random_matrix(&mut rng);
        let a = simota_assign(&m);
        match enumeration_oracle(&m) {
            Some(expect) if expect == a.gt_to_pred => {}
            Some(_) => oracle_mismatch += 1,
            None => no_oracle += 1,
        }
        if min_total_cost(&m) == a.gt_to_pred {
            cost_agree += 1;
        } else if !conflict_free(&m, &a.gt_to_pred) {
            cost_disagree_bad += 1;
        }

        let shift = rng.random_range(-50..50) as f64;
        let moved: Vec<f64> = (0..m.n_gt())
            .flat_map(|i| (0..m.n_query()).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j) + shift)
            .collect();
        if simota_assign(&CostMatrix::new(m.n_gt(), m.n_query(), moved)?) != a {
            shift_bad += 1;
        }
        if simota_assign(&m) != a {
            determinism_bad += 1;
        }
    }

    // fixed cases: argmin, a conflict, more GTs than queries, all ties
    let fixed: [(Vec<Vec<f64>>, Vec<Option<usize>>); 4] = [
        (vec![vec![0.2, 0.5]], vec![Some(0)]),
        (vec![vec![0.1, 0.9], vec![0.2, 0.3]], vec![Some(0), Some(1)]),
        (vec![vec![0.1], vec![0.2]], vec![Some(0), None]),
        (vec![vec![1.0; 3]; 3], vec![Some(0), Some(1), Some(2)]),
    ];
    let mut fixed_bad = 0;
    for (rows, expect) in &fixed {
        let a: Assignment = simota_assign(&CostMatrix::from_rows(rows)?);
        if &a.gt_to_pred != expect {
            fixed_bad += 1;
        }
    }

    let passed = oracle_mismatch == 0 && no_oracle == 0 && cost_disagree_bad == 0 && shift_bad == 0 && determinism_bad == 0 && fixed_bad == 0;
    Ok(Outcome::new(
        passed,
        format!(
            "{trials} matrices up to 5x5: {oracle_mismatch} differ from exhaustive enumeration ({no_oracle} without an oracle answer); min-total-cost agrees on {cost_agree}, {cost_disagree_bad} disagreements not conflict-free; shift changes {shift_bad}, reruns differ {determinism_bad}, fixed cases wrong {fixed_bad}"
        ),
    ))
}
