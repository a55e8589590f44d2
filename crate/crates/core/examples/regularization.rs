use dgmr_core::gmvae::{self, GmvaeConfig, NoiseMode};
use dgmr_core::hosts::idx::{surrogate, SurrogateSpec};
use dgmr_core::hosts::mlp::{MlpClassifier, MlpData, DEFAULT_SIZES, INPUT_DIM};
use dgmr_core::hosts::{no_hooks, Host, NoHook};
use dgmr_core::splice::{dropout_baseline, splice_layer, SpliceSite};
use dgmr_tensor::{OptimizerState, Rng};
use std::time::Instant;

fn env(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> dgmr_core::Result<()> {
    let n_train = env("NTRAIN", 2000);
    let n_val = env("NVAL", 2000);
    let pre = env("PRE", 150);
    let ft = env("FT", 200);
    let bs = env("BS", 64);
    let t0 = Instant::now();
    let spec = SurrogateSpec {
        label_noise: std::env::var("LN").ok().and_then(|v| v.parse().ok()).unwrap_or(0.1),
        confusion: std::env::var("CONF").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0),
        pixel_noise: std::env::var("PN").ok().and_then(|v| v.parse().ok()).unwrap_or(0.25),
        ..SurrogateSpec::default()
    };
    let set = surrogate(&spec, n_train + n_val, 7);
    let (xt, yt) = set.tensor(&(0..n_train).collect::<Vec<_>>())?;
    let (xv, yv) = set.tensor(&(n_train..n_train + n_val).collect::<Vec<_>>())?;
    let train = MlpData::new(xt, yt, bs)?;
    let val = MlpData::new(xv, yv, bs)?;
    let mut rng = Rng::seed(1);
    let mut mlp = MlpClassifier::new(INPUT_DIM, &DEFAULT_SIZES, &mut rng)?;
    let mut opt = OptimizerState::sgd(0.01);
    let mut best = (f64::MAX, 0, mlp.clone());
    for e in 0..pre {
        let tl = mlp.train_epoch(&train, &mut NoHook, &mut opt, &mut rng)?;
        let vl = mlp.eval_loss(&val, &no_hooks)?;
        if vl < best.0 {
            best = (vl, e, mlp.clone());
        }
        println!("pre {e} train {tl:.4} val {vl:.4} acc {:.3} t {:.0}s", mlp.accuracy(&val)?, t0.elapsed().as_secs_f64());
    }
    println!("best epoch {} val {:.4}", best.1, best.0);
    let ck = best.2;
    let site = SpliceSite::parse("mlp.after.1")?;
    let ct = ck.cache_at(&train, 1)?;
    let cv = ck.cache_at(&val, 1)?;
    let arms = std::env::var("ARMS").unwrap_or_else(|_| "d5,d1,g".into());
    let rates: Vec<f32> = [("d5", 0.5f32), ("d1", 0.1)]
        .iter()
        .filter(|(k, _)| arms.contains(k))
        .map(|x| x.1)
        .collect();
    for rate in rates {
        let mut r = Rng::seed(2);
        let (_, c) = dropout_baseline(ck.clone(), site.location, rate, &ct, &cv, ft, &mut OptimizerState::sgd(0.01), &mut r, None)?;
        for (e, (a, b)) in c.train.iter().zip(&c.val).enumerate() {
            if e % 10 == 0 || e + 1 == ft {
                println!("drop{rate} {e} train {a:.4} val {b:.4} t {:.0}s", t0.elapsed().as_secs_f64());
            }
        }
        let m150 = c.train.iter().take(150).cloned().fold(f64::MAX, f64::min);
        println!("SUMMARY drop{rate} min_train_150 {m150:.4} final_val {:.4}", c.val.last().unwrap());
    }
    let cfg = GmvaeConfig {
        dim_x: 700,
        dim_z: env("DZ", 32),
        dim_w: 8,
        k: 10,
        hidden_width: env("GH", 256),
        depth: 2,
        sigma_dec: std::env::var("SIG").ok().and_then(|v| v.parse().ok()).unwrap_or(0.1),
        dropout_rate: 0.0,
        learning_rate: 1e-3,
        epochs: env("GE", 30),
        batch_size: 128,
        conditional: Default::default(),
        dim_h: 0,
        separate_prior_nets: false,
    };
    if !arms.contains('g') {
        return Ok(());
    }
    let (g, log) = gmvae::train(&ct.x, None, &cfg, &mut Rng::seed(3))?;
    println!("gmvae last {:?} t {:.0}s", log.epochs.last(), t0.elapsed().as_secs_f64());
    let probe = ct.x.select_rows(&(0..200).collect::<Vec<_>>())?;
    let rec = g.reconstruct_batch(&probe, None, &mut Rng::seed(9), NoiseMode::Sample)?;
    let err: f64 = probe.data().iter().zip(rec.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / probe.numel() as f64;
    let mean: f64 = probe.data().iter().map(|&a| a as f64).sum::<f64>() / probe.numel() as f64;
    let var: f64 = probe.data().iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / probe.numel() as f64;
    println!("recon mse {err:.4} activation var {var:.4}");
    let mut s = splice_layer(ck, site, g, NoiseMode::Sample)?;
    let c = s.finetune_above(&ct, &cv, ft, &mut OptimizerState::sgd(0.01), &mut Rng::seed(2), None)?;
    for (e, (a, b)) in c.train.iter().zip(&c.val).enumerate() {
        if e % 10 == 0 || e + 1 == ft {
            println!("gmvae {e} train {a:.4} val {b:.4} t {:.0}s", t0.elapsed().as_secs_f64());
        }
    }
    let mn = c.train.iter().cloned().fold(f64::MAX, f64::min);
    println!("SUMMARY gmvae min_train {mn:.4} final_val {:.4}", c.val.last().unwrap());
    Ok(())
}
