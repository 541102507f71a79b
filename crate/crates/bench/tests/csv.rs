use asyncrma::ProgressMode;
use asyncrma_bench::avail::{read_samples, write_samples, BenchSample, Locality};
use proptest::prelude::*;

const HEADER: &str = "msg_size,mode,locality,work_iters,iter_t_us,work_t_us,base_t_us,overhead_us,availability";

fn sample() -> impl Strategy<Value = BenchSample> {
    (
        1usize..1 << 30,
        prop::sample::select(ProgressMode::ALL.to_vec()),
        prop::sample::select(vec![Locality::Intra, Locality::Inter]),
        1u64..1 << 24,
        0.0f64..1e7,
        0.0f64..1e7,
        1e-3f64..1e7,
    )
        .prop_map(|(n, mode, loc, iters, it, wt, bt)| BenchSample::from_times(n, mode, loc, iters, it, wt, bt))
}

proptest! {
    #[test]
    fn samples_round_trip_through_csv(samples in prop::collection::vec(sample(), 0..20)) {
        let meta = vec![("calibration_ns_per_iter".to_string(), "2.5".to_string())];
        let mut buf = Vec::new();
        write_samples(&mut buf, &meta, &samples).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        prop_assert!(text.starts_with("# calibration_ns_per_iter=2.5\n"));
        prop_assert_eq!(text.lines().nth(1), Some(HEADER));
        prop_assert_eq!(read_samples(buf.as_slice()).unwrap(), samples);
    }

    #[test]
    fn sample_invariants_hold(s in sample()) {
        prop_assert_eq!(s.overhead_us, s.iter_t_us - s.work_t_us);
        prop_assert_eq!(s.availability, 1.0 - s.overhead_us / s.base_t_us);
    }
}

#[test]
fn sweep_rows_are_the_cartesian_product() {
    let samples: Vec<_> = [1024, 65536]
        .iter()
        .flat_map(|&n| {
            ProgressMode::ALL.iter().flat_map(move |&m| {
                [Locality::Intra, Locality::Inter]
                    .map(|l| BenchSample::from_times(n, m, l, 1, 2.0, 1.0, 1.0))
            })
        })
        .collect();
    let mut buf = Vec::new();
    write_samples(&mut buf, &[], &samples).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * 3 * 2);
}
