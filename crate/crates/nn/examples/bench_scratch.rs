use pbci_nn::rng::SplitMix64;
use pbci_nn::Scalar;
use std::time::Instant;

fn main() {
    let mut rng = SplitMix64::new(1);
    let (n, c, t_in, f, kw, f2) = (64usize, 32usize, 750usize, 40usize, 25usize, 40usize);
    let ow = t_in - kw + 1;
    let l = c * ow;
    let x: Vec<f32> = (0..n * c * t_in).map(|_| rng.next_normal() as f32).collect();
    let w1: Vec<f32> = (0..f * kw).map(|_| rng.next_normal() as f32 * 0.1).collect();
    let b1 = vec![0f32; f];
    let w2: Vec<f32> = (0..f2 * f * c).map(|_| rng.next_normal() as f32 * 0.05).collect();
    let dy: Vec<f32> = (0..n * f2 * ow).map(|_| rng.next_normal() as f32).collect();

    let mut cols = vec![0f32; kw * l];
    let mut z = vec![0f32; f * l];
    let mut dz = vec![0f32; f * l];
    let mut dyt = vec![0f32; ow * f2];
    let mut dw1 = vec![0f32; f * kw];
    let mut db1 = vec![0f32; f];
    let mut dw2t = vec![0f32; f * c * f2];

    let (mut t_im2col, mut t_gemm_z, mut t_bias, mut t_dz, mut t_dyt, mut t_dw2, mut t_fir, mut t_db) =
        (0f64, 0f64, 0f64, 0f64, 0f64, 0f64, 0f64, 0f64);

    for s in 0..n {
        let x_s = &x[s * c * t_in..(s + 1) * c * t_in];
        let dy_s = &dy[s * f2 * ow..(s + 1) * f2 * ow];

        let t = Instant::now();
        // im2col: cols[j, (ch,t)] = x[ch, t+j]
        for j in 0..kw {
            let row = &mut cols[j * l..(j + 1) * l];
            for ch in 0..c {
                let src = &x_s[ch * t_in + j..ch * t_in + j + ow];
                row[ch * ow..(ch + 1) * ow].copy_from_slice(src);
            }
        }
        t_im2col += t.elapsed().as_secs_f64();

        let t = Instant::now();
        f32::gemm(f, kw, l, 1.0, &w1, false, &cols, false, 0.0, &mut z);
        t_gemm_z += t.elapsed().as_secs_f64();

        let t = Instant::now();
        for ff in 0..f {
            let b = b1[ff];
            for v in &mut z[ff * l..(ff + 1) * l] { *v += b; }
        }
        t_bias += t.elapsed().as_secs_f64();

        let t = Instant::now();
        f32::gemm(f * c, f2, ow, 1.0, &w2, true, dy_s, false, 0.0, &mut dz);
        t_dz += t.elapsed().as_secs_f64();

        let t = Instant::now();
        for ff in 0..f2 {
            for p in 0..ow { dyt[p * f2 + ff] = dy_s[ff * ow + p]; }
        }
        t_dyt += t.elapsed().as_secs_f64();

        let t = Instant::now();
        f32::gemm(f * c, ow, f2, 1.0, &z, false, &dyt, false, 1.0, &mut dw2t);
        t_dw2 += t.elapsed().as_secs_f64();

        let t = Instant::now();
        assert!(f32::fir_grad_weights(1, c, t_in, ow, f, kw, x_s, &dz, &mut dw1));
        t_fir += t.elapsed().as_secs_f64();

        let t = Instant::now();
        for ff in 0..f {
            let row = &dz[ff * l..(ff + 1) * l];
            db1[ff] = row.iter().fold(db1[ff], |acc, &g| acc + g);
        }
        t_db += t.elapsed().as_secs_f64();
    }
    println!("im2col {:.0} gemm_z {:.0} bias {:.0} dz {:.0} dyt {:.0} dw2 {:.0} fir {:.0} db {:.0} (ms/batch)",
        t_im2col*1e3, t_gemm_z*1e3, t_bias*1e3, t_dz*1e3, t_dyt*1e3, t_dw2*1e3, t_fir*1e3, t_db*1e3);
    std::hint::black_box((&dw1, &db1, &dw2t));
}
// appended: not used
