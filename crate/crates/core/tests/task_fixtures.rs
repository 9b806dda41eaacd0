use std::path::PathBuf;

use signmaml::tasks::{
    domain, nearest_mean_accuracy, read_episode, sample_episode, sample_task, write_episode, EpisodeStream, StreamKey,
    TaskDistribution,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn golden_episode() -> Vec<signmaml::Task> {
    let mut stream = EpisodeStream::new(42, domain::TRAIN);
    sample_episode(&TaskDistribution::blobs(3, 4, 1, 2, 5.0, 1.0), 4, &mut stream).unwrap()
}

#[test]
fn episode_matches_golden_bytes() {
    let mut bytes = Vec::new();
    write_episode(&golden_episode(), &mut bytes).unwrap();
    let golden = std::fs::read(fixture("episode_p4.bin")).unwrap();
    assert_eq!(bytes.len(), 1428);
    assert!(bytes == golden, "serialized episode differs from the golden file");
}

#[test]
fn golden_bytes_decode_to_the_same_tasks() {
    let golden = std::fs::read(fixture("episode_p4.bin")).unwrap();
    let decoded = read_episode(&mut golden.as_slice()).unwrap();
    assert_eq!(decoded, golden_episode());
}

/// Mean nearest-mean query accuracy of s = 5, σ = 1, d = 8, 5-way 1-shot
/// blobs over 10⁴ test-domain tasks, measured once and pinned.
const NEAREST_MEAN_CALIBRATION: f64 = 0.993256;

#[test]
fn nearest_mean_calibration_constant() {
    let dist = TaskDistribution::blobs(8, 5, 1, 15, 5.0, 1.0);
    let n = 10_000;
    let total: f64 = (0..n)
        .map(|t| nearest_mean_accuracy(&sample_task(&dist, StreamKey::new(2024, domain::TEST, t, 0))))
        .sum();
    let mean = total / n as f64;
    assert!(mean > 1.0 / 5.0 && mean < 1.0);
    assert!((mean - NEAREST_MEAN_CALIBRATION).abs() < 1e-6, "{mean}");
}
