use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sqlvote::agent::{parse_action, Dialect};
use sqlvote::exec::{classify_error, execution_match, fingerprint, ExecResult, Value};
use sqlvote::experts::{Phase, RawResponse};
use sqlvote::vote::{
    epsilon_for, group_candidates, select_naive, select_wma, GroupingMode, Schedule, VoteState,
};
use sqlvote::{ErrorKind, SqlCandidate};

fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        (-50i64..50).prop_map(Value::Integer),
        (-50i64..50).prop_map(|i| Value::Real(i as f64 / 4.0)),
        "[a-c]{0,3}".prop_map(Value::Text),
    ]
}

fn table() -> impl Strategy<Value = ExecResult> {
    (1usize..4).prop_flat_map(|cols| {
        prop::collection::vec(prop::collection::vec(value(), cols), 0..8).prop_map(move |rows| {
            ExecResult::rows((0..cols).map(|c| format!("c{c}")).collect(), rows)
        })
    })
}

fn candidate(i: usize, result: ExecResult) -> SqlCandidate {
    let mut c = SqlCandidate::from_generation(
        i,
        &format!("e{i}"),
        Phase::Pre,
        String::new(),
        Ok(RawResponse::text(format!("SELECT {i}"))),
    );
    c.set_exec(result);
    c
}

proptest! {
    #[test]
    fn weights_follow_mistake_counts(
        losses in prop::collection::vec(prop::collection::vec(0u8..2, 4), 1..300)
    ) {
        let t = losses.len() as u64;
        let mut st = VoteState::new(4, Schedule::KnownHorizon(t), 0);
        for row in &losses {
            st.update(row, false);
        }
        let eps = epsilon_for(4, t);
        for i in 0..4 {
            let m: u64 = losses.iter().map(|r| u64::from(r[i])).sum();
            prop_assert_eq!(st.mistakes[i], m);
            let expect = (1.0 - eps).powf(m as f64);
            prop_assert!((st.weights[i] - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn fingerprint_ignores_row_order(t in table(), seed in any::<u64>()) {
        let mut shuffled = t.clone();
        shuffled.rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(fingerprint(&t, false).unwrap(), fingerprint(&shuffled, false).unwrap());
        prop_assert!(execution_match(&shuffled, &t, false));
    }

    #[test]
    fn fingerprint_groups_agree_with_ex(tables in prop::collection::vec(table(), 1..6)) {
        let cands: Vec<SqlCandidate> =
            tables.iter().cloned().enumerate().map(|(i, t)| candidate(i, t)).collect();
        let groups = group_candidates(&cands, GroupingMode::ByFingerprint);
        let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.members.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..tables.len()).collect::<Vec<_>>());
        for (a, ta) in tables.iter().enumerate() {
            for (b, tb) in tables.iter().enumerate() {
                let same = groups.iter().any(|g| g.members.contains(&a) && g.members.contains(&b));
                prop_assert_eq!(same, execution_match(ta, tb, false));
            }
        }
    }

    #[test]
    fn unit_weights_match_naive(tables in prop::collection::vec(table(), 1..6)) {
        let cands: Vec<SqlCandidate> =
            tables.into_iter().enumerate().map(|(i, t)| candidate(i, t)).collect();
        let groups = group_candidates(&cands, GroupingMode::ByFingerprint);
        prop_assert_eq!(
            select_naive(&groups).group,
            select_wma(&groups, &vec![1.0; cands.len()]).group
        );
    }

    #[test]
    fn parse_action_never_panics(raw in "\\PC{0,200}") {
        let _ = parse_action(&raw, Dialect::Sqlite);
    }

    #[test]
    fn parse_action_handles_call_shapes(
        name in "(Bash|SQL|EXEC_SQL|Terminate|LOCAL_DB_SQL|Nope)",
        body in "[a-z_=\"', ()]{0,40}"
    ) {
        let _ = parse_action(&format!("Thought: x\nAction: {name}({body})"), Dialect::Sqlite);
    }

    #[test]
    fn classify_error_is_total(s in "\\PC{0,120}", empty in any::<bool>()) {
        prop_assert!(ErrorKind::ALL.contains(&classify_error(&s, empty)));
    }
}
