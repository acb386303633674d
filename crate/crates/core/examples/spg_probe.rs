use promptgate::config::RunConfig;
use promptgate::losses::spg_loss;
use promptgate::model::Model;
use promptgate::train::{training_samples, AdamW};

fn main() {
    let mut cfg = RunConfig::default();
    cfg.synth.n_train = 1;
    let samples = training_samples(&cfg).unwrap();
    let model = Model::new(cfg.model_config().unwrap()).unwrap();
    let partition = model.partition();
    let trainable: Vec<_> = model
        .params()
        .iter()
        .filter(|(n, _)| partition.trainable.contains(n))
        .cloned()
        .collect();
    let mut opt = AdamW::new(trainable, 0.01, 0.9, 0.999, 0.0);
    for step in 0..300 {
        let emb = model.encode_image(&samples[0].image).unwrap();
        let prompts = model.spg.as_ref().unwrap().generate(&emb.top).unwrap();
        let loss = spg_loss(&prompts.p_pos, &prompts.p_neg, &samples[0].mask).unwrap();
        if step % 50 == 0 {
            println!("step {step}: spg {:.4}", loss.item());
        }
        loss.backward();
        opt.step();
        for (_, p) in model.params() {
            p.zero_grad();
        }
    }
}
