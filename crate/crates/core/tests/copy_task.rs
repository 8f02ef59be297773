use banditmt::seq2seq::DecodeConfig;
use banditmt::supervised::{train_translation_model, TrainConfig};
use banditmt::synth::copy_task;

/// Held-out token accuracy of greedy decoding on the copy task, position by
/// position against the reference.
#[test]
fn desk_scale_model_learns_to_copy() {
    let train = copy_task(2000, 20, 3, 8, 1);
    let test = copy_task(200, 20, 3, 8, 2);
    let (model, metrics) = train_translation_model(&train, None, &TrainConfig::desk_scale(), 1).unwrap();
    assert_eq!(metrics.len(), 13);
    let (mut right, mut total) = (0usize, 0usize);
    for (src, tgt) in &test.pairs {
        let out = model.translate(src, &DecodeConfig::greedy()).unwrap();
        right += tgt.iter().zip(&out).filter(|(a, b)| a == b).count();
        total += tgt.len();
    }
    let accuracy = right as f64 / total as f64;
    assert!(accuracy >= 0.95, "held-out token accuracy {accuracy:.3}");
}
