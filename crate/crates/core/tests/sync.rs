use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synchrodaq_core::align::{
    align_session, associate, expand_labels, fill_gaps, labels_to_segments, read_labels_csv,
    write_labels_csv, AlignOptions, BACKGROUND_LABEL,
};
use synchrodaq_core::manifest::Manifest;
use synchrodaq_core::model::{
    Modality, Payload, PedalReading, SessionMeta, StampedSample, StreamSpec, Timestamp,
};
use synchrodaq_core::recording::RecordedSession;

const SEC: i64 = 1_000_000_000;

fn ts(v: &[i64]) -> Vec<Timestamp> {
    v.iter()
        .map(|&n| Timestamp::from_nanos(n).unwrap())
        .collect()
}

fn brute_associate(samples: &[i64], frames: &[i64]) -> Vec<Option<usize>> {
    frames
        .iter()
        .map(|&t| (0..samples.len()).filter(|&i| samples[i] <= t).max())
        .collect()
}

fn sorted_times(rng: &mut impl Rng, n: usize, max_step: i64) -> Vec<i64> {
    let mut t = rng.random_range(0..max_step);
    (0..n)
        .map(|_| {
            t += rng.random_range(0..=max_step);
            t
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn associate_matches_brute_force(seed in any::<u64>(), n in 0usize..=10_000, m in 0usize..400, step in 1i64..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sorted_times(&mut rng, n, step);
        let span = s.last().copied().unwrap_or(100) + 2 * step;
        let mut f: Vec<i64> = (0..m).map(|_| rng.random_range(0..span)).collect();
        f.sort_unstable();
        prop_assert_eq!(associate(&ts(&s), &ts(&f)).unwrap(), brute_associate(&s, &f));
    }
}

#[test]
fn associate_brute_force_on_small_streams_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2000 {
        let n = rng.random_range(0..30);
        let s = sorted_times(&mut rng, n, 3);
        let m = rng.random_range(0..30);
        let mut f = sorted_times(&mut rng, m, 4);
        f.dedup();
        assert_eq!(
            associate(&ts(&s), &ts(&f)).unwrap(),
            brute_associate(&s, &f)
        );
    }
}

fn meta() -> SessionMeta {
    SessionMeta {
        subject: "S".into(),
        task: "t".into(),
        trial: 1,
        master_frequency_hz: 30.0,
        pedal_mapping: vec![],
    }
}

fn session(pss: Vec<StampedSample>, video: Vec<StampedSample>) -> RecordedSession {
    let specs = [
        StreamSpec::new("pss", Modality::PedalFsr, 30.0, 1),
        StreamSpec::new("video", Modality::VideoClock, 30.0, 1),
    ];
    RecordedSession {
        dir: PathBuf::from("S_t_T01"),
        manifest: Manifest::new(&meta(), &specs).unwrap(),
        streams: BTreeMap::from([(Modality::PedalFsr, pss), (Modality::VideoClock, video)]),
    }
}

#[test]
fn aligned_values_never_come_from_the_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0usize;
    for _ in 0..10_000 {
        let n = rng.random_range(1..40);
        let m = rng.random_range(2..40);
        let s = sorted_times(&mut rng, n, 40_000_000);
        let mut v = sorted_times(&mut rng, m, 50_000_000);
        v.dedup();
        if v.len() < 2 {
            continue;
        }
        // Voltage encodes the sample index so every aligned value can be traced back.
        let pss = s
            .iter()
            .enumerate()
            .map(|(i, &t)| StampedSample {
                stream_id: "pss".into(),
                source_ts: None,
                server_ts: Timestamp::from_nanos(t).unwrap(),
                payload: Payload::Pss(vec![PedalReading {
                    channel: 1,
                    voltage: i as f64,
                    state: 0,
                }]),
            })
            .collect();
        let video = v
            .iter()
            .enumerate()
            .map(|(k, &t)| StampedSample {
                stream_id: "video".into(),
                source_ts: None,
                server_ts: Timestamp::from_nanos(t).unwrap(),
                payload: Payload::Video {
                    frame_index: k as u64,
                },
            })
            .collect();
        let trial = align_session(&session(pss, video), &AlignOptions::default()).unwrap();
        let want = brute_associate(&s, &v);
        let Some(g) = trial.group("pss1") else {
            assert!(want.iter().all(Option::is_none));
            continue;
        };
        let volts = g.field("voltage_v").unwrap();
        for k in 0..trial.len() {
            let tk = trial.frame_times[k].as_nanos();
            assert_eq!(g.missing[k], want[k].is_none());
            if !g.missing[k] {
                let src = volts[k] as usize;
                assert!(
                    s[src] <= tk,
                    "frame {k} at {tk} took a sample stamped {}",
                    s[src]
                );
                assert_eq!(Some(src), want[k]);
                checked += 1;
            }
        }
    }
    assert!(checked > 10_000);
}

fn cubic(c: [f64; 4], t: f64) -> f64 {
    c[0] + t * (c[1] + t * (c[2] + t * c[3]))
}

fn jittered_grid(rng: &mut impl Rng, n: usize) -> Vec<i64> {
    // 30 Hz with up to ±5 ms jitter.
    (0..n as i64)
        .map(|k| k * SEC / 30 + 5_000_000 + rng.random_range(-5_000_000..5_000_000))
        .collect()
}

proptest! {
    #[test]
    fn fill_gaps_reproduces_cubics_through_short_gaps(
        seed in any::<u64>(),
        c in proptest::array::uniform4(-3.0f64..3.0),
        gaps in proptest::collection::vec((3usize..200, 1usize..=28), 1..4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times = jittered_grid(&mut rng, 240);
        let secs: Vec<f64> = times.iter().map(|&t| (t - times[0]) as f64 / SEC as f64).collect();
        let truth: Vec<f64> = secs.iter().map(|&t| cubic(c, t)).collect();
        let mut missing = vec![false; times.len()];
        for &(start, len) in &gaps {
            let end = (start + len).min(times.len() - 4);
            missing[start..end].iter_mut().for_each(|m| *m = true);
        }
        // Gaps stay interior with three valid knots on each side; keep only
        // those whose flanks are within 1 s.
        let valid: Vec<usize> = (0..times.len()).filter(|&i| !missing[i]).collect();
        let short = valid.windows(2).all(|w| times[w[1]] - times[w[0]] <= SEC);
        prop_assume!(short);
        let corrupted: Vec<f64> = truth.iter().zip(&missing).map(|(&v, &m)| if m { 1e6 } else { v }).collect();
        let out = fill_gaps(&corrupted, &missing, &ts(&times), SEC).unwrap();
        for i in 0..out.len() {
            prop_assert!((out[i] - truth[i]).abs() < 1e-9, "index {}: {} vs {}", i, out[i], truth[i]);
        }
    }

    #[test]
    fn fill_gaps_forward_fills_long_gaps_exactly(
        seed in any::<u64>(),
        start in 5usize..100,
        len in 31usize..90,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times = jittered_grid(&mut rng, 240);
        let values: Vec<f64> = (0..times.len()).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut missing = vec![false; times.len()];
        missing[start..start + len].iter_mut().for_each(|m| *m = true);
        let (a, b) = (start - 1, start + len);
        prop_assume!(times[b] - times[a] > SEC);
        let out = fill_gaps(&values, &missing, &ts(&times), SEC).unwrap();
        for &v in &out[start..b] {
            prop_assert_eq!(v, values[a]);
        }
    }

    #[test]
    fn fill_gaps_is_idempotent_and_keeps_valid_entries(
        seed in any::<u64>(),
        n in 1usize..300,
        p in 0.0f64..0.9,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut times = sorted_times(&mut rng, n, SEC / 10);
        times.dedup();
        let n = times.len();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut missing: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        if missing.iter().all(|&m| m) {
            missing[n / 2] = false;
        }
        let once = fill_gaps(&values, &missing, &ts(&times), SEC).unwrap();
        for i in 0..n {
            if !missing[i] {
                prop_assert_eq!(once[i], values[i]);
            }
            prop_assert!(once[i].is_finite());
        }
        let twice = fill_gaps(&once, &missing, &ts(&times), SEC).unwrap();
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn labels_survive_segment_round_trip(
        seed in any::<u64>(),
        n in 1usize..300,
        switch in 0.0f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut times = sorted_times(&mut rng, n, SEC / 20);
        times.iter_mut().enumerate().for_each(|(i, t)| *t += i as i64);
        let names = [BACKGROUND_LABEL, "G1", "G2", "G3"];
        let mut cur = names[rng.random_range(0..4)];
        let labels: Vec<String> = (0..n)
            .map(|_| {
                if rng.random_bool(switch) {
                    cur = names[rng.random_range(0..4)];
                }
                cur.to_string()
            })
            .collect();
        let t = ts(&times);
        let segs = labels_to_segments(&labels, &t).unwrap();
        prop_assert_eq!(expand_labels(&segs, &t).unwrap(), labels);
    }
}

#[test]
fn labels_csv_round_trips_on_millisecond_bounds() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("x.labels.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = 0i64;
    let mut segs = Vec::new();
    for i in 0..50 {
        t += rng.random_range(1..2000) * 1_000_000;
        let end = t + rng.random_range(1..3000) * 1_000_000;
        segs.push(
            synchrodaq_core::model::GestureSegment::new(
                format!("G{}", i % 7),
                Timestamp::from_nanos(t).unwrap(),
                Timestamp::from_nanos(end).unwrap(),
            )
            .unwrap(),
        );
        t = end;
    }
    write_labels_csv(&p, &segs).unwrap();
    assert_eq!(read_labels_csv(&p).unwrap(), segs);
}
