use selfseg_core::data::{generate_dataset, SceneConfig};
use selfseg_core::models::ArchConfig;
use selfseg_core::train::{train_ancillary, TrainConfig};
use selfseg_core::eval::{evaluate, EvalFlags};
use selfseg_core::models::ModelKind;

fn main() {
    let scene = SceneConfig { height: 16, width: 16, num_classes: 2, shapes_min: 1, shapes_max: 2, num_images: 4, ..SceneConfig::default() };
    let arch = ArchConfig { num_classes: 2, height: 16, width: 16, encoder_widths: vec![6, 10, 12], decoder_width: 10, tap_coarse: 3, tap_fine: 0, head_hidden: 16 };
    let samples = generate_dataset(&scene, 18).unwrap();
    for lr in [0.007, 0.02, 0.05] {
        let cfg = TrainConfig { steps: 400, batch_size: 4, seed: 1, learning_rate: lr, arch: arch.clone(), ..TrainConfig::default() };
        let out = train_ancillary(&samples, &cfg).unwrap();
        let losses: Vec<f64> = out.report.steps.iter().map(|r| r.loss_f).collect();
        let r = evaluate(ModelKind::Ancillary, &cfg.arch, &out.theta, &samples, &EvalFlags::default()).unwrap();
        println!("lr={lr}: loss[0]={:.4} loss[100]={:.4} loss[399]={:.4} mIOU={:.3}",
                 losses[0], losses[100], losses[399], r.miou());
    }
}
