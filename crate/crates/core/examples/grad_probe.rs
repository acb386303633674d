use promptgate::config::RunConfig;
use promptgate::model::Model;
use promptgate::train::training_samples;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.synth.n_train = 8;
    let samples = training_samples(&cfg).unwrap();
    let model = Model::new(cfg.model_config().unwrap()).unwrap();
    let out = model.forward(&samples[0].image, model.training_protocol()).unwrap();
    let (loss, bd) = model.compute_losses(&out, &samples[0].mask).unwrap();
    println!("total {:.4} spg {:.4} coarse {:.4}", bd.total, bd.l_spg, bd.l_mask_coarse);
    loss.backward();
    let mut per: std::collections::BTreeMap<String, (f64, f64)> = Default::default();
    for (name, t) in model.params() {
        if let Some(g) = t.grad() {
            let gn: f64 = g.iter().map(|v| v * v).sum::<f64>();
            let pn: f64 = t.array().iter().map(|v| v * v).sum::<f64>();
            let top = name.split('.').take(2).collect::<Vec<_>>().join(".");
            let e = per.entry(top).or_default();
            e.0 += gn;
            e.1 += pn;
        }
    }
    for (k, (g, p)) in per {
        println!("{k:<28} grad_l2 {:>10.6} param_l2 {:>10.4}", g.sqrt(), p.sqrt());
    }
}
