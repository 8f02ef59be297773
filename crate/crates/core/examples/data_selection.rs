//! Ranks a mixed pool by cross-entropy difference and checks how many of
//! the top-ranked pairs really are in-domain.

use banditmt::select::{select_data, SelectionConfig};
use banditmt::synth::{MixedDomain, MixedDomainConfig};

fn main() -> banditmt::Result<()> {
    let data = MixedDomain::generate(&MixedDomainConfig::default(), 5);
    let config = SelectionConfig {
        fraction: 0.1,
        ..SelectionConfig::default()
    };
    let (selected, ranking) = select_data(&data.monolingual, &data.pool, &config)?;

    let hits = ranking[..selected.len()]
        .iter()
        .filter(|s| data.in_domain[s.index])
        .count();
    println!(
        "selected {} of {} pairs; {hits} drawn from the in-domain distribution",
        selected.len(),
        data.pool.len()
    );
    for s in ranking.iter().take(3) {
        println!("{:>8.3}  {}", s.score, data.pool.pairs[s.index].0.join(" "));
    }
    Ok(())
}
