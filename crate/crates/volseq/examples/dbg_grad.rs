use volseq::backbone::{Backbone, BackboneConfig};
use volseq::nn::FeatMap;
use volseq::numcheck;
use volseq::store::{GradStore, ParameterStore};
use volseq::rng;

fn main() {
    let cfg = BackboneConfig { base_channels: 4, blocks_per_stage: [1, 1, 1, 1], input_channels: 1 };
    let bb = Backbone::new(cfg.clone(), "backbone.");
    let mut store = ParameterStore::new();
    bb.init_params(&mut store, &mut rng::stream(31));
    let mut noise = rng::stream(77);
    for (_, t) in store.iter_mut() {
        for v in &mut t.data {
            *v = *v * 6.0 + rand::Rng::random_range(&mut noise, -0.2..0.2);
        }
    }

    let mut x = FeatMap::zeros(9, 9, 9, 1);
    x.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.113).sin() * 0.8);
    let h = cfg.embedding_dim();
    let loss_w: Vec<f64> = (0..h).map(|i| ((i * 37 + 11) % 19) as f64 / 19.0 - 0.5).collect();

    let (_, cache) = bb.forward_train(&store, &x);
    let mut grads = GradStore::zeros_like(&store, |_| true);
    bb.backward(&store, &cache, &loss_w, &mut grads);

    let mut f = |st: &ParameterStore| {
        let e = bb.forward_infer(st, &x);
        e.iter().zip(&loss_w).map(|(a, b)| a * b).sum::<f64>()
    };
    let name = "backbone.stage2.block0.pw1.weight";
    let analytic = grads.get(name).unwrap().to_vec();
    for h in [1e-4, 1e-5, 1e-6, 1e-7, 1e-8] {
        let fd = numcheck::central_diff(&mut store, name, 961, h, &mut f);
        println!("h={h:.0e} fd={fd:.10e} analytic={:.10e} rel={:.3e}", analytic[961], numcheck::rel_err(analytic[961], fd));
    }
}
