//! Permutation search between model output slots and reference speakers.
//!
//! The frame-summed BCE of a slot/speaker pairing decomposes into a sum of
//! per-pair column costs, so the best permutation is an assignment problem.

use crate::activity::ActivityMatrix;
use crate::error::{Error, Result};

/// Probabilities are clipped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Largest speaker count [`brute_force_pit`] accepts.
pub const BRUTE_FORCE_MAX: usize = 8;

#[inline]
pub fn clipped_bce(label: bool, prob: f64) -> f64 {
    let p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Square matrix of finite assignment costs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::InvalidInput(format!(
                "cost matrix needs {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidInput("non-finite cost entry".into()));
        }
        Ok(Self { n, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput("cost matrix must be square".into()));
        }
        Self::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    /// Total of `perm` summed in row order.
    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter()
            .enumerate()
            .fold(0.0, |acc, (i, &j)| acc + self.get(i, j))
    }

    fn tie_tolerance(&self) -> f64 {
        let scale = self.entries.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        1e-10 * scale.max(1.0) * self.n.max(1) as f64
    }
}

/// Minimum assignment cost of the sub-matrix spanned by `rows` x `cols`
/// (equal lengths), via the potentials form of the Hungarian method.
fn min_assignment(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = assign
        .iter()
        .enumerate()
        .fold(0.0, |acc, (i, &j)| acc + a(i + 1, j + 1));
    (total, assign)
}

/// Result of an exact assignment: `perm[row] = col`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
    /// More than one permutation reached the optimum.
    pub ties_broken: bool,
}

/// Minimum-cost bijection, choosing the lexicographically smallest
/// permutation among (numerically) tied optima.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let n = cost.size();
    let all: Vec<usize> = (0..n).collect();
    let (opt, _) = min_assignment(cost, &all, &all);
    let tol = cost.tie_tolerance();

    let mut perm = Vec::with_capacity(n);
    let mut free: Vec<usize> = all.clone();
    let mut fixed = 0.0;
    let mut ties_broken = false;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (k, &j) in free.iter().enumerate() {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let (rest, _) = min_assignment(cost, &rest_rows, &rest_cols);
            if fixed + cost.get(i, j) + rest <= opt + tol {
                if chosen.is_none() {
                    chosen = Some(k);
                } else {
                    ties_broken = true;
                    break;
                }
            }
        }
        // The optimum is always reachable from a feasible prefix; fall back to
        // the unconstrained choice only if rounding rejected every column.
        let k = chosen
            .unwrap_or_else(|| min_assignment(cost, &(i..n).collect::<Vec<_>>(), &free).1[0]);
        let j = free.remove(k);
        fixed += cost.get(i, j);
        perm.push(j);
    }
    let total = cost.total(&perm);
    Assignment {
        perm,
        cost: total,
        ties_broken,
    }
}

/// Outcome of a permutation-invariant alignment: `perm[slot] = speaker`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    pub perm: Vec<usize>,
    /// Frame-averaged BCE under `perm`.
    pub loss: f64,
    pub ties_broken: bool,
}

fn check_shapes(posteriors: &[f64], labels: &ActivityMatrix) -> Result<(usize, usize)> {
    let (t, s) = (labels.frames(), labels.speakers());
    if posteriors.len() != t * s {
        return Err(Error::InvalidInput(format!(
            "posteriors have {} entries, labels are {t}x{s}",
            posteriors.len()
        )));
    }
    if posteriors.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidInput("non-finite posterior".into()));
    }
    Ok((t, s))
}

/// `cost[slot][speaker]` = BCE of posterior column `slot` against label
/// column `speaker`, summed over frames. `posteriors` is T×S row-major.
pub fn pairwise_bce_costs(posteriors: &[f64], labels: &ActivityMatrix) -> Result<CostMatrix> {
    let (frames, s) = check_shapes(posteriors, labels)?;
    let mut entries = vec![0.0; s * s];
    for slot in 0..s {
        for spk in 0..s {
            entries[slot * s + spk] = (0..frames)
                .map(|t| clipped_bce(labels.get(t, spk), posteriors[t * s + slot]))
                .sum();
        }
    }
    CostMatrix::new(s, entries)
}

fn frame_average(total: f64, frames: usize) -> f64 {
    if frames == 0 {
        0.0
    } else {
        total / frames as f64
    }
}

/// Best slot→speaker permutation under frame-averaged BCE, solved exactly.
pub fn pit_align(posteriors: &[f64], labels: &ActivityMatrix) -> Result<PermutationResult> {
    let costs = pairwise_bce_costs(posteriors, labels)?;
    let a = hungarian(&costs);
    Ok(PermutationResult {
        loss: frame_average(a.cost, labels.frames()),
        perm: a.perm,
        ties_broken: a.ties_broken,
    })
}

/// Rearranges `perm` into the next permutation in lexicographic order.
fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Visits all permutations of `0..n` in lexicographic order.
pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        f(&perm);
        if !next_permutation(&mut perm) {
            break;
        }
    }
}

/// Exhaustive minimum over all permutations; reference for [`pit_align`].
pub fn brute_force_pit(posteriors: &[f64], labels: &ActivityMatrix) -> Result<PermutationResult> {
    let s = labels.speakers();
    if s > BRUTE_FORCE_MAX {
        return Err(Error::InvalidInput(format!(
            "brute-force PIT limited to {BRUTE_FORCE_MAX} speakers, got {s}"
        )));
    }
    let costs = pairwise_bce_costs(posteriors, labels)?;
    let mut totals = Vec::new();
    for_each_permutation(s, |p| totals.push((p.to_vec(), costs.total(p))));
    let best = totals.iter().map(|(_, c)| *c).fold(f64::INFINITY, f64::min);
    let tol = costs.tie_tolerance();
    let optimal: Vec<_> = totals.iter().filter(|(_, c)| *c <= best + tol).collect();
    let (perm, total) = optimal[0].clone();
    Ok(PermutationResult {
        perm,
        loss: frame_average(total, labels.frames()),
        ties_broken: optimal.len() > 1,
    })
}

/// Speaker mapping for scoring: `hyp_to_ref[h]` is the reference speaker
/// assigned to hypothesis speaker `h`, or `None` when it maps to padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerMapping {
    pub hyp_to_ref: Vec<Option<usize>>,
}

/// Maximizes the total number of frames where mapped speakers are both active.
pub fn map_speakers_for_eval(reference: &ActivityMatrix, hyp: &ActivityMatrix) -> Result<SpeakerMapping> {
    if reference.frames() != hyp.frames() {
        return Err(Error::InvalidInput(format!(
            "frame grids differ: {} vs {}",
            reference.frames(),
            hyp.frames()
        )));
    }
    let (nr, nh) = (reference.speakers(), hyp.speakers());
    let n = nr.max(nh);
    let mut entries = vec![0.0; n * n];
    for h in 0..nh {
        for r in 0..nr {
            let overlap = (0..hyp.frames())
                .filter(|&t| hyp.get(t, h) && reference.get(t, r))
                .count();
            entries[h * n + r] = -(overlap as f64);
        }
    }
    let a = hungarian(&CostMatrix::new(n, entries)?);
    Ok(SpeakerMapping {
        hyp_to_ref: (0..nh)
            .map(|h| Some(a.perm[h]).filter(|&r| r < nr))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, t: usize, s: usize) -> (Vec<f64>, ActivityMatrix) {
        let post = (0..t * s).map(|_| rng.random::<f64>()).collect();
        let labels = ActivityMatrix::from_fn(t, s, |_, _| false);
        let mut labels = labels;
        for ti in 0..t {
            for si in 0..s {
                labels.set(ti, si, rng.random_bool(0.4));
            }
        }
        (post, labels)
    }

    #[test]
    fn hungarian_small_examples() {
        let a = hungarian(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap());
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.cost, 2.0);
        let b = hungarian(&CostMatrix::from_rows(&[vec![3.0, 1.0], vec![2.0, 4.0]]).unwrap());
        assert_eq!(b.perm, vec![1, 0]);
        assert_eq!(b.cost, 3.0);
        assert!(CostMatrix::from_rows(&[vec![f64::NAN]]).is_err());
        assert!(CostMatrix::from_rows(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn hungarian_matches_exhaustive_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let entries: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..10.0)).collect();
            let cost = CostMatrix::new(6, entries).unwrap();
            let mut best = f64::INFINITY;
            let mut count = 0;
            for_each_permutation(6, |p| {
                best = best.min(cost.total(p));
                count += 1;
            });
            assert_eq!(count, 720);
            let a = hungarian(&cost);
            assert!((a.cost - best).abs() < 1e-9);
        }
    }

    #[test]
    fn hungarian_ties_pick_lexicographically_smallest() {
        let cost = CostMatrix::new(3, vec![1.0; 9]).unwrap();
        let a = hungarian(&cost);
        assert_eq!(a.perm, vec![0, 1, 2]);
        assert!(a.ties_broken);
        let cost = CostMatrix::from_rows(&[
            vec![5.0, 0.0, 0.0],
            vec![0.0, 5.0, 5.0],
            vec![5.0, 5.0, 0.0],
        ])
        .unwrap();
        assert_eq!(hungarian(&cost).perm, vec![1, 0, 2]);
    }

    #[test]
    fn pit_examples() {
        let labels = ActivityMatrix::from_fn(5, 1, |t, _| t % 2 == 0);
        let post = vec![0.3; 5];
        assert_eq!(pit_align(&post, &labels).unwrap().perm, vec![0]);

        // perfect prediction
        let labels = ActivityMatrix::from_fn(6, 3, |t, s| (t + s) % 3 == 0);
        let post: Vec<f64> = labels.to_f32().iter().map(|&x| x as f64).collect();
        let r = pit_align(&post, &labels).unwrap();
        assert_eq!(r.perm, vec![0, 1, 2]);
        assert!(r.loss < 3.0 * 2e-7);

        // swapped labels
        let labels = ActivityMatrix::from_fn(4, 2, |t, s| (t < 2) == (s == 0));
        let post: Vec<f64> = (0..4)
            .flat_map(|t| if t < 2 { [0.1, 0.9] } else { [0.9, 0.1] })
            .collect();
        assert_eq!(pit_align(&post, &labels).unwrap().perm, vec![1, 0]);
        assert_eq!(brute_force_pit(&post, &labels).unwrap().perm, vec![1, 0]);

        let empty = ActivityMatrix::zeros(10, 0);
        let r = pit_align(&[], &empty).unwrap();
        assert!(r.perm.is_empty());
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn brute_force_constant_posteriors_tie() {
        let labels = ActivityMatrix::from_fn(7, 3, |t, s| (t * 7 + s) % 3 == 1);
        let post = vec![0.5; 21];
        let r = brute_force_pit(&post, &labels).unwrap();
        assert_eq!(r.perm, vec![0, 1, 2]);
        assert!(r.ties_broken);
        let p = pit_align(&post, &labels).unwrap();
        assert_eq!(p.perm, r.perm);
        assert_eq!(p.loss, r.loss);
    }

    #[test]
    fn brute_force_refuses_large() {
        let labels = ActivityMatrix::zeros(2, 9);
        assert!(brute_force_pit(&vec![0.5; 18], &labels).is_err());
    }

    #[test]
    fn pit_matches_brute_force_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..1000 {
            let s = 1 + i % 4;
            let (post, labels) = random_case(&mut rng, 20, s);
            let a = pit_align(&post, &labels).unwrap();
            let b = brute_force_pit(&post, &labels).unwrap();
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.perm, b.perm);
        }
    }

    #[test]
    fn pit_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (t, s) = (15, 4);
            let (post, labels) = random_case(&mut rng, t, s);
            let r = pit_align(&post, &labels).unwrap();
            let identity = pairwise_bce_costs(&post, &labels).unwrap().total(&[0, 1, 2, 3]) / t as f64;
            assert!(r.loss <= identity + 1e-12);

            // common permutation of both column sets leaves the loss unchanged
            let q = [2, 0, 3, 1];
            let post_q: Vec<f64> = (0..t)
                .flat_map(|ti| q.iter().map(move |&c| (ti, c)))
                .map(|(ti, c)| post[ti * s + c])
                .collect();
            let labels_q = labels.permute_columns(&q);
            let rq = pit_align(&post_q, &labels_q).unwrap();
            assert!((rq.loss - r.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mapping() {
        let reference = ActivityMatrix::from_fn(20, 2, |t, s| (t < 10) == (s == 0));
        let swapped = reference.permute_columns(&[1, 0]);
        let m = map_speakers_for_eval(&reference, &swapped).unwrap();
        assert_eq!(m.hyp_to_ref, vec![Some(1), Some(0)]);

        let extra = reference.with_speakers(3);
        let m = map_speakers_for_eval(&reference, &extra).unwrap();
        assert_eq!(m.hyp_to_ref, vec![Some(0), Some(1), None]);
    }

    #[test]
    fn eval_mapping_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (_, reference) = random_case(&mut rng, 30, 3);
            let (_, hyp) = random_case(&mut rng, 30, 3);
            let m = map_speakers_for_eval(&reference, &hyp).unwrap();
            let agree = |map: &[usize]| -> usize {
                (0..3)
                    .map(|h| (0..30).filter(|&t| hyp.get(t, h) && reference.get(t, map[h])).count())
                    .sum()
            };
            let mut best = 0;
            for_each_permutation(3, |p| best = best.max(agree(p)));
            let ours: Vec<usize> = m.hyp_to_ref.iter().map(|r| r.unwrap()).collect();
            assert_eq!(agree(&ours), best);
        }
    }
}
