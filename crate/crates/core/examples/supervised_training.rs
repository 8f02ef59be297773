//! Trains a small attention model on a copy task, saves it and decodes
//! held-out sentences with greedy and beam search.

use banditmt::seq2seq::{DecodeConfig, TranslationModel};
use banditmt::supervised::{evaluate_bleu, train_translation_model, TrainConfig};
use banditmt::synth::copy_task;

fn main() -> banditmt::Result<()> {
    let train = copy_task(1500, 8, 2, 5, 1);
    let test = copy_task(100, 8, 2, 5, 2);
    let config = TrainConfig {
        epochs: 8,
        ..TrainConfig::desk_scale()
    };
    let (model, metrics) = train_translation_model(&train, None, &config, 1)?;
    for m in &metrics {
        println!(
            "epoch {:>2}  train ppl {:.3}  held-out ppl {:.3}",
            m.epoch, m.train_ppl, m.heldout_ppl
        );
    }

    let path = std::env::temp_dir().join("banditmt-copy.ckpt");
    model.save(&path)?;
    let model = TranslationModel::load(&path)?;
    for (name, decode) in [("greedy", DecodeConfig::greedy()), ("beam 5", DecodeConfig::beam(5))] {
        println!("{name}: BLEU {:.2}", evaluate_bleu(&model, &test, &decode)?);
    }
    let (src, _) = &test.pairs[0];
    println!(
        "{} -> {}",
        src.join(" "),
        model.translate(src, &DecodeConfig::greedy())?.join(" ")
    );
    Ok(())
}
