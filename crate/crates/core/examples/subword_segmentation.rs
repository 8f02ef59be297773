//! Learns byte-pair merges, segments unseen words and restores them.

use banditmt::bpe::{restore_words, BpeModel};

fn main() -> banditmt::Result<()> {
    let corpus: Vec<Vec<&str>> = [
        "the lower house voted for the newest proposal",
        "the widest river runs lower than the newest road",
        "low and lower and lowest",
    ]
    .iter()
    .map(|l| l.split_whitespace().collect())
    .collect();

    let bpe = BpeModel::learn(&corpus, 30)?;
    println!("{} merges, first five:", bpe.merges().len());
    for (a, b) in bpe.merges().iter().take(5) {
        println!("  {a} + {b}");
    }

    let line = ["the", "slowest", "lowering", "rivers"];
    let units = bpe.apply(&line);
    println!("{}", units.join(" "));
    let restored = restore_words(&units);
    assert_eq!(restored, line);
    println!("{}", restored.join(" "));
    Ok(())
}
