use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{space_size, Candidate, Objective, SearchOutcome, SearchSpace, SearchTrace};
use crate::error::{Error, Result};

/// Largest space exhaustive search will enumerate.
pub const EXHAUSTIVE_CAP: u64 = 100_000;

const BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreedyConfig {
    pub rounds: usize,
    /// Accept a decrement iff its loss is below the best accepted loss plus
    /// this margin. Zero means strict improvement.
    pub tol: f64,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig { rounds: 1, tol: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealConfig {
    pub steps: usize,
    pub t0: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig { steps: 2000, t0: 0.1, decay: 0.995, seed: 0 }
    }
}

/// Start at the widest bits and lower one edge at a time, keeping each
/// decrement that does not raise the loss beyond the tolerance.
pub fn greedy_search(space: &SearchSpace, obj: &dyn Objective, cfg: GreedyConfig) -> Result<SearchOutcome> {
    if cfg.rounds == 0 {
        return Err(Error::Invalid("greedy search needs at least one round".into()));
    }
    let acceptance = if cfg.tol == 0.0 { "strict" } else { "tolerance" };
    let mut trace = SearchTrace::new(json!({
        "method": "greedy",
        "rounds": cfg.rounds,
        "tol": cfg.tol,
        "acceptance": acceptance,
    }));
    let mut cur = space.highest();
    let mut cur_loss = obj.loss(&cur)?;
    let mut best_accepted = cur_loss;
    let mut evaluations = 1;
    trace.push(0, &cur, cur_loss, true);
    for _ in 0..cfg.rounds {
        for (i, r) in space.ranges.iter().enumerate() {
            while cur.0[i] > r.lo {
                let mut probe = cur.clone();
                probe.0[i] -= 1;
                let loss = obj.loss(&probe)?;
                evaluations += 1;
                let accepted = loss < best_accepted + cfg.tol;
                trace.push(evaluations - 1, &probe, loss, accepted);
                if !accepted {
                    break;
                }
                cur = probe;
                cur_loss = loss;
                best_accepted = best_accepted.min(loss);
            }
        }
    }
    Ok(SearchOutcome { best: cur, loss: cur_loss, trace, evaluations })
}

/// Metropolis walk with ±1 moves on one edge and geometric cooling. Returns
/// the lowest-loss candidate evaluated, earliest on ties.
pub fn anneal_search(space: &SearchSpace, obj: &dyn Objective, cfg: AnnealConfig) -> Result<SearchOutcome> {
    if cfg.steps == 0 || cfg.t0.is_nan() || cfg.t0 <= 0.0 || cfg.decay.is_nan() || cfg.decay <= 0.0 || cfg.decay > 1.0 {
        return Err(Error::Invalid(format!(
            "anneal needs steps >= 1, t0 > 0 and 0 < decay <= 1 (got {}, {}, {})",
            cfg.steps, cfg.t0, cfg.decay
        )));
    }
    let mut trace = SearchTrace::new(json!({
        "method": "anneal",
        "steps": cfg.steps,
        "t0": cfg.t0,
        "decay": cfg.decay,
        "seed": cfg.seed,
        "move": "one edge +-1, clamped",
    }));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cur = space.highest();
    let mut cur_loss = obj.loss(&cur)?;
    let mut evaluations = 1;
    let (mut best, mut best_loss) = (cur.clone(), cur_loss);
    trace.push(0, &cur, cur_loss, true);
    let mut temp = cfg.t0;
    for step in 1..=cfg.steps {
        let mut next = cur.clone();
        if !space.is_empty() {
            let i = rng.random_range(0..space.len());
            let r = space.ranges[i];
            let up = rng.random_bool(0.5);
            next.0[i] = if up { (next.0[i] + 1).min(r.hi) } else { next.0[i].saturating_sub(1).max(r.lo) };
        }
        let loss = if next == cur {
            cur_loss
        } else {
            evaluations += 1;
            obj.loss(&next)?
        };
        let u: f64 = rng.random();
        let accepted = loss <= cur_loss || u < (-(loss - cur_loss) / temp).exp();
        trace.push(step, &next, loss, accepted);
        if loss < best_loss {
            best = next.clone();
            best_loss = loss;
        }
        if accepted {
            cur = next;
            cur_loss = loss;
        }
        temp *= cfg.decay;
    }
    Ok(SearchOutcome { best, loss: best_loss, trace, evaluations })
}

/// `n` uniform draws; the first draw with the lowest loss wins.
pub fn random_search(space: &SearchSpace, obj: &dyn Objective, n: usize, seed: u64) -> Result<SearchOutcome> {
    if n == 0 {
        return Err(Error::Invalid("random search needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Candidate> =
        (0..n).map(|_| Candidate(space.ranges.iter().map(|r| rng.random_range(r.lo..=r.hi)).collect())).collect();
    let trace = SearchTrace::new(json!({"method": "random", "samples": n, "seed": seed}));
    pick_best(draws, obj, trace)
}

/// Every candidate in lexicographic order (last edge fastest).
pub fn exhaustive_search(space: &SearchSpace, obj: &dyn Objective, cap: u64) -> Result<SearchOutcome> {
    let size = space_size(space);
    if size > BigUint::from(cap) {
        return Err(Error::SpaceTooLarge { size: size.to_string(), cap });
    }
    let mut all = Vec::new();
    let mut c = space.lowest();
    loop {
        all.push(c.clone());
        let mut i = space.len();
        loop {
            if i == 0 {
                let trace = SearchTrace::new(json!({"method": "exhaustive", "size": all.len()}));
                return pick_best(all, obj, trace);
            }
            i -= 1;
            if c.0[i] < space.ranges[i].hi {
                c.0[i] += 1;
                break;
            }
            c.0[i] = space.ranges[i].lo;
        }
    }
}

fn pick_best(cands: Vec<Candidate>, obj: &dyn Objective, mut trace: SearchTrace) -> Result<SearchOutcome> {
    let mut best: Option<(usize, f64)> = None;
    for (start, chunk) in cands.chunks(BATCH).enumerate().map(|(k, ch)| (k * BATCH, ch)) {
        let losses = obj.losses(chunk)?;
        for (j, (c, &loss)) in chunk.iter().zip(&losses).enumerate() {
            let improved = best.is_none_or(|(_, b)| loss < b);
            if improved {
                best = Some((start + j, loss));
            }
            trace.push(start + j, c, loss, improved);
        }
    }
    let (idx, loss) = best.expect("at least one candidate");
    Ok(SearchOutcome { best: cands[idx].clone(), loss, evaluations: cands.len(), trace })
}
