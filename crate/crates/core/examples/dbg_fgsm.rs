// quick probe of the fgsm closed-form mismatch
use trimlab::attacks::{fgsm, AttackConfig};
use trimlab::label::Label;
use trimlab::nn::{Architecture, DetectorModel};
use trimlab::tensor::ImageTensor;

fn main() {
    let alpha = 0.5;
    let beta = 2.0;
    let head_w = [1.5, -0.25];
    let head_b = [0.1, -0.2];
    let arch = Architecture::with_widths(1, 4, 4, 1, 1).unwrap();
    let mut model = DetectorModel::<f64>::zeroed(arch);
    let c1 = model.conv1.weight_index(0, 0, 1, 1);
    model.conv1.weight[c1] = alpha;
    let c2 = model.conv2.weight_index(0, 0, 1, 1);
    model.conv2.weight[c2] = beta;
    model.head.weight = vec![head_w[0], head_w[1]];
    model.head.bias = vec![head_b[0], head_b[1]];

    let x = ImageTensor::from_fn(1, 4, 4, |_, i, j| 0.25 + 0.03 * (i * 4 + j) as f64);
    let g = model.input_gradient(&x, Label::Real).unwrap();
    println!("grad: {:?}", &g[..6]);

    let mean = x.data().iter().sum::<f64>() / 16.0;
    let feat = alpha * beta * mean;
    let l0 = head_w[0] * feat + head_b[0];
    let l1 = head_w[1] * feat + head_b[1];
    let m = l0.max(l1);
    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
    let p0 = e0 / (e0 + e1);
    let p1 = e1 / (e0 + e1);
    let dz = head_w[0] * (p0 - 1.0) + head_w[1] * p1;
    println!("closed-form per-pixel grad: {}", dz * alpha * beta / 16.0);

    let eps = 0.02;
    let out = fgsm(&model, &x, Label::Real, &AttackConfig::fgsm(eps)).unwrap();
    for k in 0..4 {
        let clean = x.data()[k];
        let adv = out.x_adv.data()[k];
        let expect = (clean + eps * (dz * alpha * beta / 16.0).signum()).clamp(0.0, 1.0);
        println!("k={k} clean={clean} adv={adv} expect={expect} diff={}", adv - expect);
    }
}
