//! Adapts a model trained on one domain to another from sentence-level
//! rewards alone, with a pretrained critic.

use banditmt::bandit::{collect_triples, pretrain_critic, run_bandit_loop, BanditLearner, LocalFeedback};
use banditmt::config::{PipelineConfig, Profile};
use banditmt::metrics::windowed_means;
use banditmt::seq2seq::{CriticParams, DecodeConfig};
use banditmt::supervised::{evaluate_bleu, train_translation_model};
use banditmt::synth::LexiconShift;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> banditmt::Result<()> {
    let task = LexiconShift::default();
    let config = PipelineConfig::for_profile(Profile::DeskScale);
    let (model, _) = train_translation_model(&task.domain_a(2000, 1), None, &config.train, 1)?;
    let test = task.domain_b(300, 4);
    let before = evaluate_bleu(&model, &test, &DecodeConfig::greedy())?;

    let logged = task.domain_b(1000, 3);
    let triples = collect_triples(&model, None, &logged.pairs, config.a2c.tau, 1)?;
    let critic = CriticParams::init(model.params.dims, 0.1, &mut ChaCha8Rng::seed_from_u64(1))?;
    let (critic, report) = pretrain_critic(critic, &triples, &config.a2c.pretrain, 1)?;
    println!(
        "critic held-out error {:.4} (zero critic {:.4})",
        report.heldout_mse.last().copied().unwrap_or(f64::NAN),
        report.zero_mse
    );

    let stream = task.domain_b(3000, 2);
    let (sources, references) = stream.pairs.into_iter().unzip();
    let mut feedback = LocalFeedback::new(sources, references)?;
    let mut learner = BanditLearner::new(model, critic, None, config.a2c)?;
    let run = run_bandit_loop(&mut learner, &mut feedback, 1)?;

    for w in windowed_means(&run.rewards(), 500)? {
        println!(
            "window {:>2} ({} sentences): mean reward {:.3}",
            w.index, w.count, w.mean
        );
    }
    let after = evaluate_bleu(&learner.model, &test, &DecodeConfig::greedy())?;
    println!("{} updates; BLEU {before:.2} -> {after:.2}", run.updates);
    Ok(())
}
