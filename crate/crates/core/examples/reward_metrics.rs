//! Sentence rewards, corpus BLEU and windowed reward curves.

use banditmt::metrics::{corpus_bleu, sentence_reward, windowed_means};

fn main() -> banditmt::Result<()> {
    let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let hyps: Vec<_> = ["the cat sat on the mat", "a dog barked", "it rained all day long"]
        .map(split)
        .to_vec();
    let refs: Vec<_> = [
        "the cat sat on a mat",
        "the dog barked loudly",
        "it rained all day long",
    ]
    .map(split)
    .to_vec();

    let rewards = hyps
        .iter()
        .zip(&refs)
        .map(|(h, r)| sentence_reward(h, r))
        .collect::<banditmt::Result<Vec<f64>>>()?;
    for ((h, r), s) in hyps.iter().zip(&refs).zip(&rewards) {
        println!("{s:.3}  {} | {}", h.join(" "), r.join(" "));
    }
    println!("corpus BLEU {:.2}", corpus_bleu(&hyps, &refs)?);
    for w in windowed_means(&rewards, 2)? {
        println!("window {} ({} scores): {:.3}", w.index, w.count, w.mean);
    }
    Ok(())
}
