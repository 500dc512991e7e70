use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rnpe_flows::{fit_density_estimator, BnafModel, BnafSpec, TrainConfig};

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(100);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..20000).map(|_| normal.sample(&mut rng)).collect();
    let mut m = BnafModel::new(BnafSpec::new(2), 1).unwrap();
    let cfg = TrainConfig { max_epochs: 30, ..TrainConfig::bnaf_default(2) };
    fit_density_estimator(&mut m, &data, None, &cfg).unwrap();
    let ev = m.evaluator();
    println!("slice along z0 (z1=0):");
    for &z in &[-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0] {
        let y = ev.transform(&[z, 0.0]);
        println!("  z0={z:5.1} -> y=({:7.3},{:7.3}) logq={:8.4} true={:8.4}",
            y[0], y[1], ev.log_density_std(&[z, 0.0]),
            -0.5*(z*z) - 1.8379);
    }
    println!("slice along z1 (z0=0):");
    for &z in &[-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0] {
        let y = ev.transform(&[0.0, z]);
        println!("  z1={z:5.1} -> y=({:7.3},{:7.3}) logq={:8.4} true={:8.4}",
            y[0], y[1], ev.log_density_std(&[0.0, z]),
            -0.5*(z*z) - 1.8379);
    }
    // per-dim diagnostic: 1-D marginals by quadrature
    for dimt in 0..2 {
        let mut integral = 0.0; let n = 2000; let (lo,hi) = (-8.0, 8.0);
        let step = (hi-lo)/n as f64;
        for i in 0..n {
            let z = lo + step*(i as f64+0.5);
            let p = if dimt==0 { ev.log_density_std(&[z, 0.0]) } else { ev.log_density_std(&[0.0, z]) };
            integral += p.exp()*step;
        }
        println!("slice integral dim {dimt}: {integral}");
    }
}
