use pbci_nn::ops::{self, BatchNormState};
use pbci_nn::rng::SplitMix64;
use pbci_nn::{Mode, Tape, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = SplitMix64::new(1);
    let n = 64;
    let x_data: Vec<f32> = (0..n * 32 * 750).map(|_| rng.next_normal() as f32).collect();
    let w1_data: Vec<f32> = (0..40 * 25).map(|_| rng.next_normal() as f32 * 0.1).collect();
    let w2_data: Vec<f32> = (0..40 * 40 * 32).map(|_| rng.next_normal() as f32 * 0.05).collect();
    let wd_data: Vec<f32> = (0..8 * 1760).map(|_| rng.next_normal() as f32 * 0.02).collect();
    let targets: Vec<usize> = (0..n).map(|i| i % 8).collect();

    for rep in 0..5 {
        let t0 = Instant::now();
        let mut state = BatchNormState::<f32>::new(40);
        let mut stream = SplitMix64::new(7);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[n, 1, 32, 750], x_data.clone()).unwrap());
        let w1 = tape.leaf(Tensor::from_vec(&[40, 1, 1, 25], w1_data.clone()).unwrap());
        let b1 = tape.leaf(Tensor::zeros(&[40]));
        let w2 = tape.leaf(Tensor::from_vec(&[40, 40, 32, 1], w2_data.clone()).unwrap());
        let gamma = tape.leaf(Tensor::filled(&[40], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[40]));
        let wd = tape.leaf(Tensor::from_vec(&[8, 1760], wd_data.clone()).unwrap());
        let bd = tape.leaf(Tensor::zeros(&[8]));
        let front = ops::conv_front(&mut tape, x, w1, b1, w2).unwrap();
        let bn = ops::batchnorm2d(&mut tape, front, gamma, beta, &mut state, Mode::Train, 0.1, 1e-5).unwrap();
        let sq = ops::square(&mut tape, bn).unwrap();
        let p = ops::avg_pool2d(&mut tape, sq, (1, 75), (1, 15)).unwrap();
        let lg = ops::log_clamped(&mut tape, p, 1e-6).unwrap();
        let dr = ops::dropout(&mut tape, lg, 0.5, Mode::Train, &mut stream).unwrap();
        let fl = ops::reshape(&mut tape, dr, &[n, 1760]).unwrap();
        let logits = ops::dense(&mut tape, fl, wd, Some(bd)).unwrap();
        let loss = ops::softmax_cross_entropy(&mut tape, logits, &targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        std::hint::black_box(grads.get(w1));
        println!("rep {rep}: {:.0} ms/batch", t0.elapsed().as_secs_f64() * 1e3);
    }
}
