//! Weighted-majority voting over expert candidates.
//!
//! Weights start at 1 and every erring expert's weight is multiplied by
//! `1 - ε` after each round. WMA picks the candidate group with the largest
//! weight sum, RWMA samples one expert in proportion to its weight, and
//! naive voting is WMA with weights frozen at 1.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{execution_match, ExecResult};
use crate::experts::SqlCandidate;

pub const EPSILON_MIN: f64 = 1e-6;
pub const EPSILON_MAX: f64 = 0.5;

/// Relative tolerance under which two group weights count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteStrategy {
    Wma,
    Rwma,
    Naive,
}

impl VoteStrategy {
    pub const ALL: [VoteStrategy; 3] = [VoteStrategy::Wma, VoteStrategy::Rwma, VoteStrategy::Naive];

    pub fn name(self) -> &'static str {
        match self {
            VoteStrategy::Wma => "wma",
            VoteStrategy::Rwma => "rwma",
            VoteStrategy::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    ByFingerprint,
    ByNormalizedText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum VoteError {
    #[error("supervised losses need a gold result")]
    MissingGold,
}

/// How ε is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Fixed(f64),
    KnownHorizon(u64),
    /// Unknown horizon: start with this guess and double it (resetting
    /// weights) each time the round count reaches it.
    Doubling(u64),
}

pub fn epsilon_for(n_experts: usize, horizon: u64) -> f64 {
    let n = n_experts.max(1) as f64;
    let t = horizon.max(1) as f64;
    (n.ln() / t).sqrt().clamp(EPSILON_MIN, EPSILON_MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: u64,
    pub epsilon: f64,
    pub losses: Vec<u8>,
    pub algorithm_loss: u8,
    pub weights: Vec<f64>,
    pub mistakes: Vec<u64>,
    pub algorithm_mistakes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteState {
    pub weights: Vec<f64>,
    pub round: u64,
    pub epsilon: f64,
    pub schedule: Schedule,
    /// Current horizon (grows under the doubling schedule).
    pub horizon: Option<u64>,
    /// Per-expert mistakes since the start of the run (m_i).
    pub mistakes: Vec<u64>,
    /// Per-expert mistakes since the last weight reset.
    pub epoch_mistakes: Vec<u64>,
    /// Algorithm mistakes (M_T).
    pub algorithm_mistakes: u64,
    /// False for naive voting: weights stay at 1.
    pub learning: bool,
    pub seed: u64,
    pub trajectory: Vec<Snapshot>,
}

impl VoteState {
    pub fn new(n_experts: usize, schedule: Schedule, seed: u64) -> Self {
        assert!(n_experts >= 1, "at least one expert");
        let (epsilon, horizon) = match schedule {
            Schedule::Fixed(e) => (e.clamp(EPSILON_MIN, EPSILON_MAX), None),
            Schedule::KnownHorizon(t) | Schedule::Doubling(t) => {
                (epsilon_for(n_experts, t), Some(t.max(1)))
            }
        };
        VoteState {
            weights: vec![1.0; n_experts],
            round: 0,
            epsilon,
            schedule,
            horizon,
            mistakes: vec![0; n_experts],
            epoch_mistakes: vec![0; n_experts],
            algorithm_mistakes: 0,
            learning: true,
            seed,
            trajectory: Vec::new(),
        }
    }

    /// State for naive voting: mistakes are counted, weights never move.
    pub fn frozen(n_experts: usize, seed: u64) -> Self {
        let mut s = Self::new(n_experts, Schedule::Fixed(EPSILON_MIN), seed);
        s.learning = false;
        s
    }

    pub fn n_experts(&self) -> usize {
        self.weights.len()
    }

    /// M* = min_i m_i.
    pub fn best_expert_mistakes(&self) -> u64 {
        self.mistakes.iter().copied().min().unwrap_or(0)
    }

    /// (1 - ε)^{m_i} over the current epoch: what weight `i` must equal.
    pub fn expected_weight(&self, i: usize) -> f64 {
        if !self.learning {
            return 1.0;
        }
        (1.0 - self.epsilon).powf(self.epoch_mistakes[i] as f64)
    }

    /// p_i = w_i / Σ w_j.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    /// Apply one round of 0/1 losses.
    pub fn update(&mut self, losses: &[u8], algorithm_loss: bool) {
        assert_eq!(losses.len(), self.n_experts(), "one loss per expert");
        if let (Schedule::Doubling(_), Some(h)) = (self.schedule, self.horizon) {
            if self.round >= h {
                let next = h.saturating_mul(2);
                self.horizon = Some(next);
                self.epsilon = epsilon_for(self.n_experts(), next);
                self.weights.iter_mut().for_each(|w| *w = 1.0);
                self.epoch_mistakes.iter_mut().for_each(|m| *m = 0);
            }
        }
        for (i, &loss) in losses.iter().enumerate() {
            if loss != 0 {
                self.mistakes[i] += 1;
                self.epoch_mistakes[i] += 1;
                if self.learning {
                    self.weights[i] =
                        (self.weights[i] * (1.0 - self.epsilon)).max(f64::MIN_POSITIVE);
                }
            }
        }
        self.algorithm_mistakes += u64::from(algorithm_loss);
        self.round += 1;
        self.trajectory.push(Snapshot {
            round: self.round,
            epsilon: self.epsilon,
            losses: losses.iter().map(|&l| u8::from(l != 0)).collect(),
            algorithm_loss: u8::from(algorithm_loss),
            weights: self.weights.clone(),
            mistakes: self.mistakes.clone(),
            algorithm_mistakes: self.algorithm_mistakes,
        });
    }
}

/// Candidates that agree, as a set of expert indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub key: String,
    pub members: Vec<usize>,
}

impl Group {
    pub fn min_member(&self) -> usize {
        self.members.iter().copied().min().unwrap_or(usize::MAX)
    }
}

/// Lowercase outside quotes, collapse whitespace, drop trailing `;`.
pub fn normalize_sql(sql: &str) -> String {
    let mut out = String::with_capacity(sql.len());
    let mut quote: Option<char> = None;
    let mut pending_space = false;
    for c in sql.trim().chars() {
        match quote {
            Some(q) => {
                out.push(c);
                if c == q {
                    quote = None;
                }
            }
            None if c.is_whitespace() => pending_space = true,
            None => {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                if c == '\'' || c == '"' || c == '`' {
                    quote = Some(c);
                }
                out.extend(c.to_lowercase());
            }
        }
    }
    while out.ends_with(';') || out.ends_with(' ') {
        out.pop();
    }
    out
}

fn group_key(c: &SqlCandidate, mode: GroupingMode) -> String {
    if mode == GroupingMode::ByFingerprint {
        if let Some(fp) = &c.fingerprint {
            return format!("fp:{fp}");
        }
    }
    match &c.sql {
        Some(sql) => format!("sql:{}", normalize_sql(sql)),
        None => format!("none:{}", c.expert_index),
    }
}

/// Groups in order of first appearance.
pub fn group_candidates(candidates: &[SqlCandidate], mode: GroupingMode) -> Vec<Group> {
    let mut groups: Vec<Group> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for c in candidates {
        let key = group_key(c, mode);
        match index.get(&key) {
            Some(&g) => groups[g].members.push(c.expert_index),
            None => {
                index.insert(key.clone(), groups.len());
                groups.push(Group {
                    key,
                    members: vec![c.expert_index],
                });
            }
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub strategy: VoteStrategy,
    /// Index into the group list.
    pub group: usize,
    pub group_key: String,
    pub group_weight: f64,
    /// Expert whose candidate is returned.
    pub selected_expert: usize,
    /// RWMA only: the sampled expert.
    pub chosen_expert: Option<usize>,
    pub tallies: Vec<(String, f64)>,
}

fn tallies(groups: &[Group], weights: &[f64]) -> Vec<f64> {
    groups
        .iter()
        .map(|g| g.members.iter().map(|&i| weights[i]).sum())
        .collect()
}

fn argmax_group(groups: &[Group], totals: &[f64]) -> usize {
    let max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOLERANCE * max.abs();
    (0..groups.len())
        .filter(|&g| max - totals[g] <= tol)
        .min_by(|&a, &b| {
            groups[a]
                .min_member()
                .cmp(&groups[b].min_member())
                .then_with(|| groups[a].key.cmp(&groups[b].key))
        })
        .expect("at least one group")
}

fn outcome(
    strategy: VoteStrategy,
    groups: &[Group],
    totals: Vec<f64>,
    g: usize,
    chosen: Option<usize>,
) -> VoteOutcome {
    VoteOutcome {
        strategy,
        group: g,
        group_key: groups[g].key.clone(),
        group_weight: totals[g],
        selected_expert: chosen.unwrap_or_else(|| groups[g].min_member()),
        chosen_expert: chosen,
        tallies: groups
            .iter()
            .zip(&totals)
            .map(|(gr, &w)| (gr.key.clone(), w))
            .collect(),
    }
}

/// argmax_s W(s); ties go to the group holding the lowest expert index,
/// then to the lexicographically smaller key.
pub fn select_wma(groups: &[Group], weights: &[f64]) -> VoteOutcome {
    assert!(!groups.is_empty(), "at least one group");
    let totals = tallies(groups, weights);
    let g = argmax_group(groups, &totals);
    outcome(VoteStrategy::Wma, groups, totals, g, None)
}

pub fn select_naive(groups: &[Group]) -> VoteOutcome {
    let n = groups
        .iter()
        .flat_map(|g| g.members.iter())
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let mut o = select_wma(groups, &vec![1.0; n]);
    o.strategy = VoteStrategy::Naive;
    o
}

/// Sample expert `i` with probability w_i / Σ w_j. The draw for a round is
/// a pure function of (seed, round).
pub fn sample_expert(weights: &[f64], seed: u64, round: u64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round);
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

pub fn select_rwma(groups: &[Group], state: &VoteState) -> VoteOutcome {
    let chosen = sample_expert(&state.weights, state.seed, state.round);
    let totals = tallies(groups, &state.weights);
    let g = groups
        .iter()
        .position(|g| g.members.contains(&chosen))
        .expect("every expert is in a group");
    outcome(VoteStrategy::Rwma, groups, totals, g, Some(chosen))
}

pub fn select(strategy: VoteStrategy, groups: &[Group], state: &VoteState) -> VoteOutcome {
    match strategy {
        VoteStrategy::Wma => select_wma(groups, &state.weights),
        VoteStrategy::Rwma => select_rwma(groups, state),
        VoteStrategy::Naive => select_naive(groups),
    }
}

/// Per-candidate 0/1 loss. Supervised: wrong unless the result matches
/// gold. Unsupervised: wrong when execution errs or returns no rows.
pub fn candidate_loss(
    candidate: &SqlCandidate,
    gold: Option<&ExecResult>,
    gold_order_sensitive: bool,
    mode: LossMode,
) -> Result<u8, VoteError> {
    let exec = candidate.exec.as_ref();
    let wrong = match mode {
        LossMode::Supervised => {
            let gold = gold.ok_or(VoteError::MissingGold)?;
            !exec.is_some_and(|e| execution_match(e, gold, gold_order_sensitive))
        }
        LossMode::Unsupervised => !exec.is_some_and(ExecResult::is_success),
    };
    Ok(u8::from(wrong))
}

pub fn loss_vector(
    candidates: &[SqlCandidate],
    gold: Option<&ExecResult>,
    gold_order_sensitive: bool,
    mode: LossMode,
) -> Result<Vec<u8>, VoteError> {
    candidates
        .iter()
        .map(|c| candidate_loss(c, gold, gold_order_sensitive, mode))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundVariant {
    Wma,
    Rwma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub variant: BoundVariant,
    pub lhs: f64,
    pub tight_rhs: f64,
    pub relaxed_rhs: f64,
    pub tight_satisfied: bool,
    pub relaxed_satisfied: bool,
}

fn bound_rhs(variant: BoundVariant, m_star: f64, epsilon: f64, n: usize, t: u64) -> (f64, f64) {
    let ln_n = (n.max(1) as f64).ln();
    let root = (t as f64 * ln_n).sqrt();
    match variant {
        BoundVariant::Wma => (
            m_star * (2.0 + epsilon) + 2.0 * ln_n / epsilon,
            2.0 * m_star + 4.0 * root,
        ),
        BoundVariant::Rwma => (
            (1.0 + epsilon) * m_star + ln_n / epsilon,
            m_star + 2.0 * root,
        ),
    }
}

fn report(variant: BoundVariant, lhs: f64, tight: f64, relaxed: f64) -> BoundReport {
    BoundReport {
        variant,
        lhs,
        tight_rhs: tight,
        relaxed_rhs: relaxed,
        tight_satisfied: lhs <= tight,
        relaxed_satisfied: lhs <= relaxed,
    }
}

/// Mistake bound for one finished run. For RWMA the lhs is this run's
/// M_T; use [`bound_check_rwma`] for the expectation.
pub fn bound_check(state: &VoteState, variant: BoundVariant) -> BoundReport {
    let m_star = state.best_expert_mistakes() as f64;
    let (tight, relaxed) = bound_rhs(
        variant,
        m_star,
        state.epsilon,
        state.n_experts(),
        state.round,
    );
    report(variant, state.algorithm_mistakes as f64, tight, relaxed)
}

/// RWMA bound with lhs = mean M_T over runs that share one loss matrix.
pub fn bound_check_rwma(runs: &[VoteState]) -> BoundReport {
    assert!(!runs.is_empty(), "at least one run");
    let first = &runs[0];
    let mean = runs
        .iter()
        .map(|r| r.algorithm_mistakes as f64)
        .sum::<f64>()
        / runs.len() as f64;
    let m_star = first.best_expert_mistakes() as f64;
    let (tight, relaxed) = bound_rhs(
        BoundVariant::Rwma,
        m_star,
        first.epsilon,
        first.n_experts(),
        first.round,
    );
    report(BoundVariant::Rwma, mean, tight, relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub round: u64,
    pub mistakes: u64,
    pub best_expert_mistakes: u64,
    pub error_rate: f64,
    pub regret: i64,
    pub avg_regret: f64,
}

pub fn regret_series(state: &VoteState) -> Vec<RegretPoint> {
    state
        .trajectory
        .iter()
        .map(|s| {
            let best = s.mistakes.iter().copied().min().unwrap_or(0);
            let regret = s.algorithm_mistakes as i64 - best as i64;
            RegretPoint {
                round: s.round,
                mistakes: s.algorithm_mistakes,
                best_expert_mistakes: best,
                error_rate: s.algorithm_mistakes as f64 / s.round as f64,
                regret,
                avg_regret: regret as f64 / s.round as f64,
            }
        })
        .collect()
}

/// Synthetic runs over 0/1 loss matrices (`losses[t][i]`).
pub mod sim {
    use super::*;

    /// Each expert is independently correct with its own probability.
    pub fn random_losses(accuracies: &[f64], rounds: usize, rng: &mut impl Rng) -> Vec<Vec<u8>> {
        (0..rounds)
            .map(|_| {
                accuracies
                    .iter()
                    .map(|&p| u8::from(!rng.gen_bool(p.clamp(0.0, 1.0))))
                    .collect()
            })
            .collect()
    }

    /// Binary prediction: experts split into a right and a wrong group;
    /// WMA errs when it picks the wrong group.
    fn binary_groups(losses: &[u8]) -> Vec<Group> {
        let right: Vec<usize> = (0..losses.len()).filter(|&i| losses[i] == 0).collect();
        let wrong: Vec<usize> = (0..losses.len()).filter(|&i| losses[i] != 0).collect();
        [("right", right), ("wrong", wrong)]
            .into_iter()
            .filter(|(_, m)| !m.is_empty())
            .map(|(k, m)| Group {
                key: k.to_string(),
                members: m,
            })
            .collect()
    }

    pub fn run_wma(losses: &[Vec<u8>], schedule: Schedule) -> VoteState {
        let n = losses.first().map(Vec::len).unwrap_or(1);
        let mut state = VoteState::new(n, schedule, 0);
        for row in losses {
            let groups = binary_groups(row);
            let pick = select_wma(&groups, &state.weights);
            state.update(row, groups[pick.group].key == "wrong");
        }
        state
    }

    pub fn run_naive(losses: &[Vec<u8>]) -> VoteState {
        let n = losses.first().map(Vec::len).unwrap_or(1);
        let mut state = VoteState::frozen(n, 0);
        for row in losses {
            let groups = binary_groups(row);
            let pick = select_naive(&groups);
            state.update(row, groups[pick.group].key == "wrong");
        }
        state
    }

    pub fn run_rwma(losses: &[Vec<u8>], schedule: Schedule, seed: u64) -> VoteState {
        let n = losses.first().map(Vec::len).unwrap_or(1);
        let mut state = VoteState::new(n, schedule, seed);
        for row in losses {
            let chosen = sample_expert(&state.weights, state.seed, state.round);
            state.update(row, row[chosen] != 0);
        }
        state
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct SimulationConfig {
        pub experts: usize,
        pub rounds: usize,
        /// Loss matrices; each runs WMA once and RWMA `seeds` times.
        pub trials: usize,
        pub seeds: usize,
        pub seed: u64,
    }

    /// Bound reports per trial: WMA on the single run, RWMA on the mean
    /// over seeds. Expert accuracies are drawn from [0.3, 0.9].
    pub fn simulate_bounds(cfg: &SimulationConfig) -> Vec<(usize, BoundReport)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let schedule = Schedule::KnownHorizon(cfg.rounds as u64);
        let mut out = Vec::with_capacity(cfg.trials * 2);
        for trial in 0..cfg.trials {
            let acc: Vec<f64> = (0..cfg.experts.max(1))
                .map(|_| rng.gen_range(0.3..0.9))
                .collect();
            let losses = random_losses(&acc, cfg.rounds, &mut rng);
            out.push((
                trial,
                bound_check(&run_wma(&losses, schedule), BoundVariant::Wma),
            ));
            let runs: Vec<VoteState> = (0..cfg.seeds.max(1) as u64)
                .map(|s| run_rwma(&losses, schedule, s))
                .collect();
            out.push((trial, bound_check_rwma(&runs)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{Phase, RawResponse};

    fn g(key: &str, members: &[usize]) -> Group {
        Group {
            key: key.into(),
            members: members.to_vec(),
        }
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon_for(1, 100), EPSILON_MIN);
        assert!((epsilon_for(6, 1000) - 0.042330).abs() < 1e-6);
        assert_eq!(epsilon_for(2, 2), 0.5);
    }

    #[test]
    fn wma_selection() {
        let o = select_wma(&[g("s1", &[0, 2]), g("s2", &[1])], &[1.0, 0.8, 0.5]);
        assert_eq!(o.group_key, "s1");
        assert!((o.group_weight - 1.5).abs() < 1e-15);
        let o = select_wma(&[g("b", &[1]), g("a", &[0])], &[1.0, 1.0]);
        assert_eq!(o.group_key, "a");
        assert_eq!(o.selected_expert, 0);
        let o = select_wma(&[g("x", &[0, 1, 2])], &[0.3, 0.2, 0.1]);
        assert!((o.group_weight - 0.6).abs() < 1e-15);
    }

    #[test]
    fn rwma_probabilities_and_determinism() {
        let mut s = VoteState::new(3, Schedule::Fixed(0.1), 42);
        s.weights = vec![1.0, 1.0, 2.0];
        assert_eq!(s.probabilities(), vec![0.25, 0.25, 0.5]);
        let a: Vec<usize> = (0..50).map(|r| sample_expert(&[1.0, 1.0], 7, r)).collect();
        let b: Vec<usize> = (0..50).map(|r| sample_expert(&[1.0, 1.0], 7, r)).collect();
        assert_eq!(a, b);
        assert!(a.contains(&0) && a.contains(&1));
        assert_eq!(sample_expert(&[3.0], 1, 5), 0);
    }

    #[test]
    fn update_arithmetic() {
        let mut s = VoteState::new(2, Schedule::Fixed(0.1), 0);
        s.update(&[1, 0], false);
        assert!((s.weights[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.weights[1], 1.0);
        s.update(&[1, 0], true);
        assert!((s.weights[0] - 0.81).abs() < 1e-15);
        assert_eq!(s.mistakes, vec![2, 0]);
        assert_eq!(s.algorithm_mistakes, 1);
        assert_eq!(s.trajectory.len(), 2);
    }

    #[test]
    fn doubling_resets_epoch() {
        let mut s = VoteState::new(4, Schedule::Doubling(8), 0);
        let e0 = s.epsilon;
        for _ in 0..9 {
            s.update(&[1, 0, 0, 0], false);
        }
        assert_eq!(s.horizon, Some(16));
        assert!(s.epsilon < e0);
        assert_eq!(s.epoch_mistakes[0], 1);
        assert_eq!(s.mistakes[0], 9);
        assert!((s.weights[0] - s.expected_weight(0)).abs() < 1e-15);
    }

    #[test]
    fn naive_keeps_unit_weights() {
        let mut s = VoteState::frozen(2, 0);
        s.update(&[1, 1], true);
        assert_eq!(s.weights, vec![1.0, 1.0]);
        assert_eq!(s.mistakes, vec![1, 1]);
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize_sql("SELECT a FROM t"),
            normalize_sql("select a  from t;")
        );
        assert_eq!(normalize_sql("SELECT 'A  B'"), "select 'A  B'");
        assert_eq!(normalize_sql("  select\n1 ;; "), "select 1");
    }

    fn cand(i: usize, sql: Option<&str>) -> SqlCandidate {
        let text = sql.unwrap_or("no idea");
        SqlCandidate::from_generation(
            i,
            &format!("e{i}"),
            Phase::Pre,
            String::new(),
            Ok(RawResponse::text(text)),
        )
    }

    #[test]
    fn grouping_modes() {
        let mut a = cand(0, Some("SELECT 1"));
        let mut b = cand(1, Some("select 1 + 0"));
        let c = cand(2, None);
        a.set_exec(ExecResult::rows(
            vec!["x".into()],
            vec![vec![crate::Value::Integer(1)]],
        ));
        b.set_exec(ExecResult::rows(
            vec!["y".into()],
            vec![vec![crate::Value::Integer(1)]],
        ));
        let cands = vec![a, b, c];
        let by_fp = group_candidates(&cands, GroupingMode::ByFingerprint);
        assert_eq!(by_fp.len(), 2);
        assert_eq!(by_fp[0].members, vec![0, 1]);
        assert_eq!(by_fp[1].key, "none:2");
        let by_text = group_candidates(&cands, GroupingMode::ByNormalizedText);
        assert_eq!(by_text.len(), 3);
    }

    #[test]
    fn losses() {
        let gold = ExecResult::rows(vec!["x".into()], vec![vec![crate::Value::Integer(1)]]);
        let mut right = cand(0, Some("SELECT 1"));
        right.set_exec(gold.clone());
        let mut wrong = cand(1, Some("SELECT 2"));
        wrong.set_exec(ExecResult::rows(
            vec!["x".into()],
            vec![vec![crate::Value::Integer(2)]],
        ));
        let mut broken = cand(2, Some("SELEC"));
        broken.set_exec(ExecResult::error(crate::ErrorKind::Syntax, "syntax error"));
        let cands = vec![right, wrong, broken];
        assert_eq!(
            loss_vector(&cands, Some(&gold), false, LossMode::Supervised).unwrap(),
            vec![0, 1, 1]
        );
        assert_eq!(
            loss_vector(&cands, None, false, LossMode::Unsupervised).unwrap(),
            vec![0, 0, 1]
        );
        assert_eq!(
            loss_vector(&cands, None, false, LossMode::Supervised),
            Err(VoteError::MissingGold)
        );
    }

    #[test]
    fn regret_arithmetic() {
        let mut s = VoteState::new(2, Schedule::Fixed(0.1), 0);
        for t in 0..10 {
            let alg = t < 5;
            let l0 = u8::from(t < 3);
            s.update(&[l0, 1], alg);
        }
        let last = regret_series(&s).pop().unwrap();
        assert_eq!(
            (last.mistakes, last.best_expert_mistakes, last.regret),
            (5, 3, 2)
        );
        assert!((last.avg_regret - 0.2).abs() < 1e-15);
        assert!((last.error_rate - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bounds_for_single_expert_and_perfect_expert() {
        let losses: Vec<Vec<u8>> = (0..50).map(|t| vec![u8::from(t % 3 == 0)]).collect();
        let s = sim::run_wma(&losses, Schedule::KnownHorizon(50));
        assert_eq!(s.algorithm_mistakes, s.best_expert_mistakes());
        assert!(bound_check(&s, BoundVariant::Wma).tight_satisfied);
        let losses: Vec<Vec<u8>> = (0..200).map(|t| vec![0, u8::from(t % 2 == 0), 1]).collect();
        let s = sim::run_wma(&losses, Schedule::KnownHorizon(200));
        let r = bound_check(&s, BoundVariant::Wma);
        assert_eq!(s.best_expert_mistakes(), 0);
        assert!((r.tight_rhs - 2.0 * 3f64.ln() / s.epsilon).abs() < 1e-9);
        assert!(r.tight_satisfied && r.relaxed_satisfied);
    }
}
