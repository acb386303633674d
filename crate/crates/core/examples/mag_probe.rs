use promptgate::config::RunConfig;
use promptgate::model::Model;
use promptgate::train::training_samples;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.synth.n_train = 1;
    let samples = training_samples(&cfg).unwrap();
    let model = Model::new(cfg.model_config().unwrap()).unwrap();
    let emb = model.encode_image(&samples[0].image).unwrap();
    let std = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let stats = |name: &str, t: &promptgate::Tensor| {
        let a = t.array();
        let v: Vec<f64> = a.iter().copied().collect();
        println!(
            "{name:<12} shape {:?} mean {:+.4} std {:.4} max|.| {:.4}",
            t.shape(),
            v.iter().sum::<f64>() / v.len() as f64,
            std(&v),
            v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
        );
    };
    stats("E top", &emb.top);
    let prompts = model.spg.as_ref().unwrap().generate(&emb.top).unwrap();
    stats("P_pos", &prompts.p_pos);
    stats("S_pos", &prompts.s_pos);
    stats("T_prop", &prompts.t_prop);
    let z = model.prompt_encoder.encode_dense(&prompts.p_pos).unwrap();
    stats("Z_pos", &z);
    let out = model.forward_from_prompts(emb, prompts).unwrap();
    stats("M_c", &out.prediction.m_coarse);
}
