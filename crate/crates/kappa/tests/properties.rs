use proptest::prelude::*;

use kappa::reward::{combine, histogram, summarize_group, Answer, NormMode, RewardConfig};
use kappa::{
    alignment_reward, batch_advantages, clamp_to_image, group_advantages, iou, parse_bytes, parse_trajectory,
    serialize_trajectory, BBox,
};

fn bbox() -> impl Strategy<Value = BBox> {
    (-20i64..90, -20i64..90, -20i64..90, -20i64..90).prop_map(|(a, b, c, d)| BBox::new(a, b, c, d))
}

fn answer() -> impl Strategy<Value = Answer> {
    prop_oneof![
        Just(Answer::Value("A".into())),
        Just(Answer::Value("B".into())),
        Just(Answer::Value("C".into())),
        Just(Answer::Invalid),
    ]
}

fn fragment() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("<think>".to_string()),
        Just("</think>".to_string()),
        Just("<tool_call>".to_string()),
        Just("</tool_call>".to_string()),
        Just("<answer>".to_string()),
        Just("</answer>".to_string()),
        Just(r#"{"bbox_2d":[1,2,30,40]}"#.to_string()),
        Just(r#"{"echo":"Hypoechoic"}"#.to_string()),
        Just("{".to_string()),
        Just(" ".to_string()),
        Just("\n".to_string()),
        "[a-z <>/{}\":,0-9]{0,6}",
    ]
}

proptest! {
    #[test]
    fn parser_is_total_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let t = parse_bytes(&bytes);
        if t.is_valid() {
            let again = parse_trajectory(&serialize_trajectory(&t).unwrap());
            prop_assert!(again.is_valid());
            prop_assert!(again.same_structure(&t));
        }
    }

    #[test]
    fn token_soup_round_trips(parts in proptest::collection::vec(fragment(), 0..12)) {
        let t = parse_trajectory(&parts.concat());
        match serialize_trajectory(&t) {
            Ok(s) => {
                prop_assert!(t.is_valid());
                let again = parse_trajectory(&s);
                prop_assert!(again.same_structure(&t));
                prop_assert_eq!(serialize_trajectory(&again).unwrap(), s);
            }
            Err(_) => prop_assert!(!t.is_valid()),
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        match (iou(&a, &b), iou(&b, &a)) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x, y);
                prop_assert!((0.0..=1.0).contains(&x));
            }
            (Err(_), Err(_)) => prop_assert!(a.area() == 0 || b.area() == 0),
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }

    #[test]
    fn iou_with_itself_is_one(a in bbox()) {
        if let Ok(n) = a.normalize() {
            prop_assert_eq!(iou(&n, &n).unwrap(), 1.0);
        }
    }

    #[test]
    fn clamp_is_idempotent(a in bbox()) {
        if let Ok(n) = a.normalize() {
            if let Ok(c) = clamp_to_image(&n, (64, 64)) {
                prop_assert_eq!(clamp_to_image(&c, (64, 64)).unwrap(), c);
                prop_assert!(c.x1 >= 0 && c.y1 >= 0 && c.x2 <= 64 && c.y2 <= 64 && c.area() > 0);
            }
        }
    }

    #[test]
    fn consensus_dominates(answers in proptest::collection::vec(answer(), 1..12)) {
        let s = summarize_group(&answers, "A").unwrap();
        let g = answers.len();
        prop_assert_eq!(s.kappa, s.count as f64 / g as f64);
        for (a, n) in histogram(&answers) {
            if a != Answer::Invalid || s.consensus == Answer::Invalid {
                prop_assert!(n <= s.count);
            }
        }
        prop_assert_eq!(s.xi == 1, s.consensus == Answer::Value("A".into()));
    }

    #[test]
    fn alignment_branches_are_exclusive(answers in proptest::collection::vec(answer(), 1..10), delta in 0.05f64..1.0) {
        let cfg = RewardConfig { delta, ..RewardConfig::default() };
        let s = summarize_group(&answers, "B").unwrap();
        prop_assert!(alignment_reward(&s, 1, &cfg) + alignment_reward(&s, 0, &cfg) <= 1.0);
    }

    #[test]
    fn per_group_advantages_sum_to_zero(r in proptest::collection::vec(0.0f64..2.0, 2..16)) {
        let q: Vec<f64> = r.iter().map(|x| combine(&[*x])).collect();
        let a = group_advantages(&q);
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        let std = (q.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / q.len() as f64).sqrt();
        if std > 0.0 {
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-6);
        } else {
            prop_assert!(a.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn group_constant_shift_cancels(
        r in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 8), 1..6),
        bonus in proptest::collection::vec(prop_oneof![Just(0.0), Just(0.5)], 6),
    ) {
        let base: Vec<Vec<f64>> = r.iter().map(|g| g.iter().map(|x| combine(&[*x])).collect()).collect();
        let shifted: Vec<Vec<f64>> =
            base.iter().zip(&bonus).map(|(g, b)| g.iter().map(|x| combine(&[*x, *b])).collect()).collect();
        let a = batch_advantages(&base, NormMode::PerGroup);
        let b = batch_advantages(&shifted, NormMode::PerGroup);
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn scaling_weights_keeps_advantage_order(r in proptest::collection::vec(0.0f64..1.0, 2..10), k in 0.5f64..4.0) {
        let q: Vec<f64> = r.iter().map(|x| combine(&[*x])).collect();
        let s: Vec<f64> = q.iter().map(|x| combine(&[x * k])).collect();
        let (a, b) = (group_advantages(&q), group_advantages(&s));
        for i in 0..q.len() {
            for j in 0..q.len() {
                if a[i] < a[j] - 1e-9 {
                    prop_assert!(b[i] <= b[j]);
                }
            }
        }
    }
}

/// Every multiset of size 1..=4 over {A, B, C} against a counting oracle.
#[test]
fn consensus_matches_brute_force() {
    let alphabet = ["A", "B", "C"];
    let mut checked = 0;
    for size in 1..=4usize {
        for code in 0..3usize.pow(size as u32) {
            let mut c = code;
            let answers: Vec<Answer> = (0..size)
                .map(|_| {
                    let a = alphabet[c % 3];
                    c /= 3;
                    Answer::Value(a.into())
                })
                .collect();
            let counts: Vec<usize> =
                alphabet.iter().map(|x| answers.iter().filter(|a| a.value() == Some(x)).count()).collect();
            let top = *counts.iter().max().unwrap();
            let winner = alphabet[counts.iter().position(|n| *n == top).unwrap()];
            for y in alphabet {
                let s = summarize_group(&answers, y).unwrap();
                assert_eq!(s.consensus, Answer::Value(winner.into()), "{answers:?}");
                assert_eq!(s.count, top);
                assert_eq!(s.kappa, top as f64 / size as f64);
                assert_eq!(s.xi, u8::from(winner == y));
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 3 + 9 + 27 + 81);
}
