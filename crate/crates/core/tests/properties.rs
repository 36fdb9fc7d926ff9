//! Property tests over random traces, profiles, point sets and modules.

use proptest::prelude::*;

use nugget::analyze::{replay_trace, HookState};
use nugget::ir::{build_block_table, parse_module, BlockEntry, BlockTable, InstKind};
use nugget::marker::{derive_end_marker, derive_relaxed_marker};
use nugget::profile::{cumulative_count, BlockSample, IntervalProfile, ProfileSet};
use nugget::selection::{
    kmeans_restarts, select_kmeans, select_random, silhouette, DEFAULT_MAX_ITERS,
};

fn table_of(lens: &[u64]) -> BlockTable {
    BlockTable {
        entries: lens
            .iter()
            .enumerate()
            .map(|(i, &len)| BlockEntry {
                bb_id: i as u64,
                function_name: format!("f{}", i / 3),
                block_label: format!("b{i}"),
                inst_count: len,
            })
            .collect(),
    }
}

/// Block lengths, a trace over them, and an interval size.
fn trace_case() -> impl Strategy<Value = (Vec<u64>, Vec<u64>, u64)> {
    prop::collection::vec(1u64..40, 1..12).prop_flat_map(|lens| {
        let n = lens.len() as u64;
        (Just(lens), prop::collection::vec(0..n, 1..600), 1u64..200)
    })
}

fn counter_after(trace: &[u64], table: &BlockTable, bb: u64, required: u64) -> Option<u64> {
    let mut counter = 0;
    let mut seen = 0;
    for &b in trace {
        counter += table.inst_count(b).unwrap();
        if b == bb {
            seen += 1;
            if seen == required {
                return Some(counter);
            }
        }
    }
    None
}

proptest! {
    #[test]
    fn conservation_and_size_bounds((lens, trace, s) in trace_case()) {
        let table = table_of(&lens);
        let p = replay_trace(trace.iter().copied(), &table, s).unwrap();
        let total: u64 = trace.iter().map(|&b| lens[b as usize]).sum();
        prop_assert_eq!(p.intervals.iter().map(|i| i.actual_size).sum::<u64>(), total);

        let lmax = trace.iter().map(|&b| lens[b as usize]).max().unwrap();
        for (i, iv) in p.intervals.iter().enumerate() {
            prop_assert_eq!(iv.interval_id, i as u64);
            let weighted: u64 = iv.entries.iter().map(|e| e.count * lens[e.bb_id as usize]).sum();
            prop_assert_eq!(weighted, iv.actual_size);
            if iv.partial {
                prop_assert_eq!(i, p.intervals.len() - 1);
                prop_assert!(iv.actual_size < s);
            } else {
                prop_assert!(iv.actual_size >= s && iv.actual_size < s + lmax);
            }
            let mut stamps: Vec<u64> = iv.entries.iter().map(|e| e.cstamp).collect();
            stamps.sort_unstable();
            prop_assert!(stamps.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert!(p.validate().is_ok());
    }

    #[test]
    fn hook_state_matches_counter((lens, trace, s) in trace_case()) {
        let mut st = HookState::new(s);
        let mut emitted = 0u64;
        for &b in &trace {
            if let Some(r) = st.step(b, lens[b as usize]) {
                emitted += r.actual_size;
                prop_assert_eq!(st.interval_start, st.global_counter);
            }
            prop_assert!(st.global_counter - st.interval_start < s);
        }
        emitted += st.finalize().map_or(0, |r| r.actual_size);
        prop_assert_eq!(emitted, st.global_counter);
        prop_assert!(st.finalize().is_none());
    }

    #[test]
    fn profile_encoding_round_trips((lens, trace, s) in trace_case()) {
        let table = table_of(&lens);
        let p = replay_trace(trace.iter().copied(), &table, s).unwrap();
        let bytes = p.encode();
        let back = ProfileSet::decode(&bytes, &table).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn markers_reach_boundaries((lens, trace, s) in trace_case(), frac in 0.0f64..1.5) {
        let table = table_of(&lens);
        let p = replay_trace(trace.iter().copied(), &table, s).unwrap();
        let d = (frac * s as f64) as u64;
        for i in 0..p.full_intervals().len() {
            let boundary = p.interval_end(i).unwrap();
            let exact = derive_end_marker(&p, i).unwrap();
            prop_assert!(exact.required_count >= 1 && !exact.relaxed && exact.slack == 0);
            prop_assert_eq!(
                counter_after(&trace, &table, exact.bb_id, exact.required_count),
                Some(boundary)
            );
            let relaxed = derive_relaxed_marker(&p, i, d).unwrap();
            let reached = counter_after(&trace, &table, relaxed.bb_id, relaxed.required_count).unwrap();
            prop_assert!(reached <= boundary && reached + d >= boundary);
            prop_assert_eq!(boundary - reached, relaxed.slack);
            prop_assert_eq!(relaxed.relaxed, relaxed.slack > 0);
        }
    }

    #[test]
    fn required_counts_non_decreasing((lens, trace, s) in trace_case()) {
        let table = table_of(&lens);
        let p = replay_trace(trace.iter().copied(), &table, s).unwrap();
        for bb in 0..lens.len() as u64 {
            let counts: Vec<u64> = (0..p.len())
                .map(|i| cumulative_count(&p, bb, i).unwrap())
                .collect();
            prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        }
        let ends: Vec<_> = (0..p.full_intervals().len())
            .map(|i| derive_end_marker(&p, i).unwrap())
            .collect();
        for w in ends.windows(2) {
            if w[0].bb_id == w[1].bb_id {
                prop_assert!(w[0].required_count < w[1].required_count);
            }
        }
    }
}

/// Intervals over unit-length blocks with 64 instructions each, so normalized
/// coordinates are exact dyadic fractions.
fn profile_case() -> impl Strategy<Value = (usize, Vec<Vec<u64>>)> {
    (2usize..7).prop_flat_map(|blocks| {
        let interval = prop::collection::vec(0u64..8, blocks).prop_map(|w| {
            let total: u64 = w.iter().sum::<u64>().max(1);
            let mut counts: Vec<u64> = w.iter().map(|x| x * 64 / total).collect();
            let short = 64 - counts.iter().sum::<u64>();
            counts[0] += short;
            counts
        });
        (Just(blocks), prop::collection::vec(interval, 3..16))
    })
}

fn profiles_from(blocks: usize, counts: &[Vec<u64>], perm: &[usize]) -> ProfileSet {
    let intervals = counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut entries: Vec<BlockSample> = c
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(b, &n)| BlockSample {
                    bb_id: perm[b] as u64,
                    count: n,
                    cstamp: i as u64 * 64 + 1 + b as u64,
                })
                .collect();
            entries.sort_by_key(|e| e.bb_id);
            IntervalProfile {
                interval_id: i as u64,
                actual_size: 64,
                partial: false,
                entries,
            }
        })
        .collect();
    ProfileSet {
        interval_size: 64,
        intervals,
        block_table: table_of(&vec![1; blocks]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_invariant_under_axis_permutation(
        (blocks, counts) in profile_case(),
        shuffle in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..blocks).collect();
        perm.rotate_left(shuffle.index(blocks));
        perm.swap(0, blocks - 1);
        let identity: Vec<usize> = (0..blocks).collect();
        let a = select_kmeans(&profiles_from(blocks, &counts, &identity), 8, seed).unwrap();
        let b = select_kmeans(&profiles_from(blocks, &counts, &perm), 8, seed).unwrap();
        prop_assert_eq!(a.k_used, b.k_used);
        prop_assert_eq!(&a.assignments, &b.assignments);
        prop_assert_eq!(&a.chosen, &b.chosen);
    }

    #[test]
    fn selection_weights_normalized((blocks, counts) in profile_case(), seed in any::<u64>(), n in 1usize..5) {
        let identity: Vec<usize> = (0..blocks).collect();
        let p = profiles_from(blocks, &counts, &identity);
        let n = n.min(counts.len());
        let km = select_kmeans(&p, 50, seed).unwrap();
        let rnd = select_random(&p, n, seed).unwrap();
        for sel in [&km, &rnd] {
            prop_assert!((sel.weight_sum() - 1.0).abs() <= 1e-9);
            let mut ids: Vec<u64> = sel.chosen.iter().map(|c| c.interval_id).collect();
            ids.dedup();
            prop_assert_eq!(ids.len(), sel.chosen.len());
        }
        prop_assert!(rnd.chosen.iter().all(|c| c.weight == 1.0 / n as f64));
        prop_assert_eq!(rnd.chosen.len(), n);
        prop_assert_eq!(&km, &select_kmeans(&p, 50, seed).unwrap());
        prop_assert_eq!(&rnd, &select_random(&p, n, seed).unwrap());
    }

    #[test]
    fn proportional_bbvs_coincide((blocks, counts) in profile_case()) {
        let identity: Vec<usize> = (0..blocks).collect();
        let mut p = profiles_from(blocks, &counts, &identity);
        let scaled = {
            let mut iv = p.intervals[0].clone();
            for e in &mut iv.entries {
                e.count *= 3;
            }
            iv.actual_size *= 3;
            iv
        };
        p.intervals[1] = IntervalProfile { interval_id: 1, ..scaled.clone() };
        let a = nugget::selection::normalize_bbv(&p.intervals[0], &p);
        let b = nugget::selection::normalize_bbv(&scaled, &p);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn silhouette_bounded(
        points in prop::collection::vec(prop::collection::vec(-4i32..4, 3), 3..20),
        k in 2usize..4,
        seed in any::<u64>(),
    ) {
        let points: Vec<Vec<f64>> = points
            .into_iter()
            .map(|p| p.into_iter().map(f64::from).collect())
            .collect();
        prop_assume!(k <= points.len());
        let c = kmeans_restarts(&points, k, seed, DEFAULT_MAX_ITERS, 3).unwrap();
        prop_assert!(c.assignments.iter().all(|&a| a < k));
        if let Ok(s) = silhouette(&points, &c.assignments) {
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}

/// Random module text: functions of labelled blocks whose bodies mix counted
/// instructions, debug intrinsics, comments and blank lines.
fn module_case() -> impl Strategy<Value = String> {
    let inst = prop_oneof![
        4 => (0u32..100).prop_map(|n| format!("  %v{n} = add i32 {n}, 1")),
        1 => Just("  call void @llvm.dbg.value(metadata i32 0, metadata !1, metadata !DIExpression())".to_string()),
        1 => Just("  ; note".to_string()),
        1 => Just("  store i32 0, i32* @g, align 4".to_string()),
    ];
    let term = prop_oneof![
        Just("  ret void".to_string()),
        Just("  unreachable".to_string()),
        Just("  br label %b0".to_string()),
    ];
    let block = (prop::collection::vec(inst, 0..6), term);
    let function = prop::collection::vec(block, 1..5);
    prop::collection::vec(function, 1..4).prop_map(|fs| {
        let mut s = String::from("@g = global i32 0\n\ndeclare void @ext()\n");
        for (fi, blocks) in fs.into_iter().enumerate() {
            s.push_str(&format!("\ndefine void @fn{fi}() {{\n"));
            for (bi, (body, term)) in blocks.into_iter().enumerate() {
                if bi > 0 {
                    s.push('\n');
                }
                s.push_str(&format!("b{bi}:\n"));
                for l in body {
                    s.push_str(&l);
                    s.push('\n');
                }
                s.push_str(&term);
                s.push('\n');
            }
            s.push_str("}\n");
        }
        s
    })
}

proptest! {
    #[test]
    fn module_text_round_trips(text in module_case()) {
        let m = parse_module(&text).unwrap();
        prop_assert_eq!(m.emit(), text.clone());
        let t = build_block_table(&m);
        prop_assert_eq!(t.total_inst_count(), m.total_inst_count());
        prop_assert_eq!(&t, &build_block_table(&parse_module(&text).unwrap()));
        let counted = text
            .lines()
            .filter(|l| l.starts_with("  ") && !l.trim_start().starts_with(';') && !l.contains("@llvm.dbg."))
            .count() as u64;
        prop_assert_eq!(t.total_inst_count(), counted);
    }

    #[test]
    fn insertions_only_add_lines(text in module_case(), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..6)) {
        let mut m = parse_module(&text).unwrap();
        let n = build_block_table(&m).len();
        for (i, pick) in picks.iter().enumerate() {
            let b = m.block_mut(pick.index(n) as u64).unwrap();
            b.insert_call_before_terminator(&format!("  call void @ext() ; hook {i}"));
            prop_assert!(b.instructions.last().unwrap().kind == InstKind::Terminator);
        }
        let out = m.emit();
        let stripped: Vec<&str> = out.lines().filter(|l| !l.contains("; hook")).collect();
        prop_assert_eq!(stripped, text.lines().collect::<Vec<_>>());
        prop_assert_eq!(out.matches("; hook").count(), picks.len());
        prop_assert_eq!(build_block_table(&m), build_block_table(&parse_module(&text).unwrap()));
    }
}
