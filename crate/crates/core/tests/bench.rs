use cmx_core::engine::bench::{benchmark_coherence, read_csv, write_csv, BenchOptions};

#[test]
fn doubling_q_roughly_doubles_the_cost() {
    let rows = benchmark_coherence(&BenchOptions {
        n_list: vec![8192],
        q_list: vec![16, 32],
        reps: 4,
        ..Default::default()
    })
    .unwrap();
    let ratio = rows[1].mean_s / rows[0].mean_s;
    assert!((1.6..=2.6).contains(&ratio), "q=32 / q=16 took {ratio:.2}x");
}

#[test]
fn csv_round_trips_with_the_documented_header() {
    let rows = benchmark_coherence(&BenchOptions {
        n_list: vec![64, 65],
        q_list: vec![4],
        reps: 2,
        ..Default::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next(), Some("n,q,mean_s,stddev_s,reps"));
    assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
}
