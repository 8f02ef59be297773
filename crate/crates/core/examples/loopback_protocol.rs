//! Serves a reference corpus over TCP and adapts a model against it through
//! the line protocol, then compares the two logs.

use std::thread;

use banditmt::bandit::{run_bandit_loop, A2cConfig, BanditLearner};
use banditmt::net::{BanditServer, NetChannel, ServedCorpus, ServerConfig};
use banditmt::seq2seq::{CriticParams, ModelDims, NmtParams, TranslationModel, Vocabulary};
use banditmt::synth::LexiconShift;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> banditmt::Result<()> {
    let task = LexiconShift::default();
    let data = task.domain_b(300, 9);
    let sources: Vec<String> = data.sources().map(|s| s.join(" ")).collect();
    let refs: Vec<String> = data.targets().map(|t| t.join(" ")).collect();
    let server = BanditServer::bind(
        "127.0.0.1:0",
        ServedCorpus::new(&sources, &refs)?,
        ServerConfig::default(),
    )?;
    let addr = server.local_addr()?;
    let serving = thread::spawn(move || server.serve(1));

    let (src_words, tgt_words) = task.lexicon();
    let src_vocab = Vocabulary::build([src_words.iter().map(String::as_str)], None);
    let tgt_vocab = Vocabulary::build([tgt_words.iter().map(String::as_str)], None);
    let dims = ModelDims {
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        embed: 8,
        hidden: 8,
        layers: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = TranslationModel {
        params: NmtParams::init(dims, 0.3, &mut rng)?,
        src_vocab,
        tgt_vocab,
    };
    let critic = CriticParams::init(dims, 0.3, &mut rng)?;
    let config = A2cConfig {
        batch_size: 32,
        max_len: Some(8),
        ..A2cConfig::default()
    };
    let mut learner = BanditLearner::new(model, critic, None, config)?;

    let mut channel = NetChannel::connect(addr)?;
    let run = run_bandit_loop(&mut learner, &mut channel, 1)?;
    channel.finish()?;
    let summaries = serving.join().expect("server thread")?;

    let server_log = &summaries[0];
    println!("client logged {} rewards over {} updates", run.log.len(), run.updates);
    println!(
        "server rewarded {} translations, {} protocol errors",
        server_log.triples.len(),
        server_log.errors
    );
    for t in run.log.iter().take(3) {
        println!("{:>3} {:.3}  {}  =>  {}", t.id, t.reward, t.source, t.hypothesis);
    }
    Ok(())
}
