use dibc::eval::compute_metrics;
use dibc::kernels::stream_rng;
use dibc::model::Points;
use dibc::runtime::wire::Kind;
use dibc::runtime::{run_pipeline, PipelineConfig, TransportChoice};
use rand_distr::{Distribution, StandardNormal};

fn two_blobs(n: usize, seed: u64) -> (Points, Vec<usize>) {
    let mut rng = stream_rng(seed, 0);
    let mut pts = Points::empty(2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % 2;
        let x: f64 = StandardNormal.sample(&mut rng);
        let y: f64 = StandardNormal.sample(&mut rng);
        pts.push(&[x + 12.0 * k as f64, y]);
        labels.push(k);
    }
    (pts, labels)
}

fn small(workers: usize) -> PipelineConfig {
    PipelineConfig {
        workers,
        clusters: 4,
        subcomponents: 2,
        n_iters: 120,
        burn_in: 60,
        refine_samples: 10,
        candidates: 5,
        param_iters: 100,
        param_burn_in: 50,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn single_worker_recovers_two_clusters() {
    let (pts, truth) = two_blobs(400, 1);
    let res = run_pipeline(&small(1), &pts).unwrap();
    let m = compute_metrics(&truth, &res.clusters).unwrap();
    assert_eq!(res.diagnostics.cluster_sizes.len(), 2);
    assert_eq!(m.ari, 1.0);
    assert!(res.diagnostics.timings.iter().any(|t| t.skipped));
}

#[test]
fn four_workers_recover_two_clusters() {
    let (pts, truth) = two_blobs(800, 2);
    let res = run_pipeline(&small(4), &pts).unwrap();
    let m = compute_metrics(&truth, &res.clusters).unwrap();
    assert!(m.ari >= 0.95, "ari {}", m.ari);
    assert!(res.diagnostics.dropped_samples.is_empty());
}

#[test]
fn socket_and_in_process_transports_agree() {
    let (pts, _) = two_blobs(300, 3);
    let a = run_pipeline(&small(3), &pts).unwrap();
    let cfg = PipelineConfig {
        transport: TransportChoice::Tcp { addrs: vec![] },
        ..small(3)
    };
    let b = run_pipeline(&cfg, &pts).unwrap();
    assert_eq!(a.clusters, b.clusters);
    assert_eq!(a.draws, b.draws);
    assert_eq!(a.diagnostics.traffic, b.diagnostics.traffic);
}

#[test]
fn master_receives_statistics_only() {
    let (pts, _) = two_blobs(300, 4);
    let res = run_pipeline(&small(3), &pts).unwrap();
    let traffic = &res.diagnostics.traffic;
    let allowed = [
        Kind::Ack,
        Kind::ChainReport,
        Kind::ItemStatsUpload,
        Kind::LoglikReply,
        Kind::CountsUpload,
        Kind::SuffStatsUpload,
        Kind::LabelsUpload,
    ];
    for kind in traffic.received.keys() {
        assert!(allowed.contains(kind), "master received {kind:?}");
    }
    assert_eq!(traffic.sent[&Kind::ShardAssign].messages, 3);
}
