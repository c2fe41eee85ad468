use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use proptest::strategy::Strategy as _;
use rand::{RngCore, SeedableRng};
use tofec_core::codec::{self, gf256, CodedFile};
use tofec_core::engine::{run, ArrivalProcess, DelaySampler, LeftoverPolicy, RequestRecord, SimOptions};
use tofec_core::metrics::{composition, percentile, summarize};
use tofec_core::model::{
    load_from_queue, mean_queue_length, ClassSpec, CodeChoice, DelayParams, OpType, SystemSpec,
};
use tofec_core::solver::{build_thresholds, code_functions_of_queue};
use tofec_core::strategies::{Strategy, TofecState};

fn class(params: DelayParams, k_max: usize, r_max: f64) -> ClassSpec {
    ClassSpec {
        op_type: OpType::Read,
        file_size: 3.0,
        popularity: 1.0,
        k_max,
        r_max,
        params,
    }
}

fn params() -> impl proptest::strategy::Strategy<Value = DelayParams> {
    (1.0..50.0f64, 1.0..40.0f64, 1.0..150.0f64, 1.0..60.0f64)
        .prop_map(|(a, b, c, d)| DelayParams::new(a, b, c, d).unwrap())
}

fn record(id: usize, arrival: f64, wait: f64, service: f64, k: usize) -> RequestRecord {
    RequestRecord {
        id,
        class_id: 0,
        arrival,
        dispatch: Some(arrival + wait),
        completion: Some(arrival + wait + service),
        code: CodeChoice { n: k, k },
        queue_at_arrival: 0,
        idle_at_arrival: 0,
        usage: service,
        tasks_done: k,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn queue_length_and_load_are_inverse(x in 0.001..0.999f64, l in 1usize..64) {
        let lb = x * l as f64;
        let q = mean_queue_length(lb, l).unwrap();
        let back = load_from_queue(q, l).unwrap();
        prop_assert!((back - lb).abs() <= 1e-9 * lb.max(1.0));
    }

    #[test]
    fn code_functions_fall_with_backlog(p in params(), q in 0.01..50.0f64, step in 1.001..3.0f64) {
        let c = class(p, 6, 2.0);
        let a = code_functions_of_queue(&c, q, 16).unwrap();
        let b = code_functions_of_queue(&c, q * step, 16).unwrap();
        prop_assert!(b.n < a.n && b.k < a.k && b.r < a.r);
        prop_assert!((a.n - a.k * a.r).abs() <= 1e-9 * a.n);
    }

    #[test]
    fn tofec_choice_never_grows_with_backlog(
        p in params(),
        history in proptest::collection::vec(0usize..200, 0..20),
        lo in 0usize..200,
        extra in 0usize..200,
    ) {
        let c = class(p, 6, 2.0);
        let classes = vec![c.clone()];
        let mut a = TofecState::for_classes(&classes, 16, 0.9).unwrap();
        let mut b = a.clone();
        for &h in &history {
            a.select(0, &c, h).unwrap();
            b.select(0, &c, h).unwrap();
        }
        let x = a.select(0, &c, lo).unwrap();
        let y = b.select(0, &c, lo + extra).unwrap();
        prop_assert!(y.k <= x.k && y.n <= x.n, "{x} then {y}");
        prop_assert!(x.n >= x.k && x.n <= c.n_cap(x.k));
    }

    #[test]
    fn thresholds_interleave(p in params(), k_max in 1usize..8, r_max in 1.0..3.0f64) {
        let t = build_thresholds(&class(p, k_max, r_max), 16).unwrap();
        for (q, h) in [(&t.queue_n, &t.cut_n), (&t.queue_k, &t.cut_k)] {
            prop_assert_eq!(h.len(), q.len() + 1);
            for i in 0..q.len() {
                prop_assert!(h[i] > q[i] && q[i] > h[i + 1]);
            }
        }
    }

    #[test]
    fn summary_ignores_order(
        raw in proptest::collection::vec((0.0..1e4f64, 0.0..500.0f64, 1.0..800.0f64, 1usize..7), 1..60),
        seed in any::<u64>(),
    ) {
        let recs: Vec<RequestRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, &(t, w, s, k))| record(i, t, w, s, k))
            .collect();
        let mut shuffled = recs.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            shuffled.swap(i, j);
        }
        let a = summarize(&recs, 1e4).unwrap();
        let b = summarize(&shuffled, 1e4).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.median <= a.p90 && a.p90 <= a.p99 && a.p99 <= a.max);
        let ca = composition(&recs, 6);
        let total: f64 = ca.k_fraction.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert_eq!(ca, composition(&shuffled, 6));
    }

    #[test]
    fn nearest_rank_percentile_is_an_element(mut xs in proptest::collection::vec(-1e3..1e3f64, 1..50), p in 0.0..=100.0f64) {
        xs.sort_by(f64::total_cmp);
        let v = percentile(&xs, p).unwrap();
        // Smallest element with at least p% of the sample at or below it.
        let rank = ((p / 100.0 * xs.len() as f64).ceil() as usize).max(1);
        prop_assert_eq!(v, xs[rank - 1]);
    }

    #[test]
    fn field_multiplication_inverts(a in 1u8..=255, b in any::<u8>()) {
        prop_assert_eq!(gf256::mul(a, gf256::inv(a)), 1);
        prop_assert_eq!(gf256::div(gf256::mul(a, b), a), b);
        prop_assert_eq!(gf256::mul(a, b), gf256::mul(b, a));
    }

    #[test]
    fn codec_round_trip_any_length(
        groups in 1usize..8,
        strip in 1usize..64,
        pad_frac in 0.0..1.0f64,
        level in prop::sample::select(vec![1usize, 2, 3, 6]),
        seed in any::<u64>(),
    ) {
        // K is a multiple of 6 so every level divides it; the tail strip is padded.
        let pad = (pad_frac * strip as f64) as usize;
        let mut data = vec![0u8; 6 * groups * strip - pad];
        rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);
        let coded = codec::encode(&data, strip, 2.0).unwrap();
        let coded = CodedFile::from_bytes(&coded.to_bytes()).unwrap();
        let count = coded.header.chunk_count(level).unwrap();
        // Take the last `level` chunks: as many parity chunks as possible.
        let picks: Vec<(usize, &[u8])> = (count - level + 1..=count).map(|j| (j, coded.chunk(level, j).unwrap())).collect();
        prop_assert_eq!(codec::decode(&coded.header, level, &picks).unwrap(), data);
    }

    #[test]
    fn engine_conserves_requests(
        rate in 0.005..0.2f64,
        which in 0usize..3,
        complete in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let c = class(DelayParams::new(21.0, 8.0, 76.0, 28.0).unwrap(), 6, 2.0);
        let spec = SystemSpec { thread_count: 8, classes: vec![c.clone()] };
        let strategy = match which {
            0 => Strategy::Tofec(TofecState::for_classes(&spec.classes, 8, 0.99).unwrap()),
            1 => Strategy::Greedy,
            _ => Strategy::Static(vec![CodeChoice { n: 4, k: 2 }]),
        };
        let mut opts = SimOptions::new(20_000.0, seed);
        opts.leftover = if complete { LeftoverPolicy::Complete } else { LeftoverPolicy::Cancel };
        opts.overload_bound = 1_000;
        let r = run(&spec, &ArrivalProcess::Poisson { rate }, DelaySampler::Parametric, strategy, opts).unwrap();
        prop_assert!(r.conservation.balanced(), "{:?}", r.conservation);
        for x in &r.records {
            if let (Some(d), Some(f)) = (x.dispatch, x.completion) {
                prop_assert!(x.arrival <= d && d <= f);
                prop_assert!(x.tasks_done >= x.code.k);
                prop_assert!(x.code.n >= x.code.k && x.code.n <= c.n_cap(x.code.k));
            }
        }
    }
}
