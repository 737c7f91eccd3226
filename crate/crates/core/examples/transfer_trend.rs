//! Trains the three ablation variants on a synthetic pair and prints target OA.
//!
//! Usage: cargo run --release --example transfer_trend -- [key=value ...]
//! Keys: seeds, epochs, cf, blocks, hidden, patch, lr, batch, sep, bg_src, bg_tgt,
//! gain_lo, gain_hi, offset, noise, std, size, lambda1, lambda2, disc, scene_seed,
//! seed0, variants (comma-separated names).

use std::collections::HashMap;
use std::time::Instant;

use hsi_uda::backbone::BackboneConfig;
use hsi_uda::eval::{evaluate, MaskMode};
use hsi_uda::experiment::{synth_patch_pair, SynthSpec, Variant};
use hsi_uda::trainer::{train_with, TrainConfig};

fn main() -> hsi_uda::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map(|v| v.parse::<f64>().expect(k)).unwrap_or(d);

    let d = SynthSpec::default();
    let synth = SynthSpec {
        height: get("size", d.height as f64) as usize,
        width: get("size", d.width as f64) as usize,
        separation: get("sep", d.separation),
        prototype_seed: get("scene_seed", 0.0) as u64,
        class_std: get("std", d.class_std),
        noise: get("noise", d.noise),
        gain_first: get("gain_lo", d.gain_first),
        gain_last: get("gain_hi", d.gain_last),
        offset: get("offset", d.offset),
        source_background: get("bg_src", d.source_background),
        target_background: get("bg_tgt", d.target_background),
        ..d
    };
    let spec = synth.scene_spec()?;
    let patch = get("patch", 7.0) as usize;
    let (src, tgt) = synth_patch_pair(&spec, get("scene_seed", 0.0) as u64, patch)?;
    println!("source {} labeled, target {} labeled", src.len(), tgt.len());

    let base = TrainConfig {
        epochs: get("epochs", 8.0) as usize,
        batch_size: get("batch", 64.0) as usize,
        learning_rate: get("lr", 1e-3),
        patch_size: patch,
        disc_hidden: get("disc", 16.0) as usize,
        backbone: BackboneConfig {
            stem_out_channels: get("cf", 16.0) as usize,
            num_blocks: get("blocks", 2.0) as usize,
            residual_hidden: get("hidden", 8.0) as usize,
        },
        ..TrainConfig::default()
    };
    let mut cfg_base = base;
    cfg_base.weights.lambda1 = get("lambda1", 0.1);
    cfg_base.weights.lambda2 = get("lambda2", 1.0);

    let seeds = get("seeds", 3.0) as u64;
    let seed0 = get("seed0", 0.0) as u64;
    let variants: Vec<Variant> = match args.get("variants") {
        Some(list) => Variant::ALL
            .into_iter()
            .filter(|v| list.split(',').any(|n| n == v.name()))
            .collect(),
        None => Variant::ALL.to_vec(),
    };
    let start = Instant::now();
    for seed in seed0..seed0 + seeds {
        let mut line = format!("seed {seed}:");
        for &v in &variants {
            let mut cfg = v.apply(&cfg_base);
            cfg.seed = seed;
            let t = Instant::now();
            let mut curve = Vec::new();
            let model = train_with(
                &cfg,
                &src,
                &tgt,
                Some(&mut |m| curve.push((evaluate(m, &tgt, MaskMode::Recompute).unwrap().overall_accuracy * 100.0).round() as u32)),
            )?;
            let rec = evaluate(&model, &tgt, MaskMode::Recompute)?.overall_accuracy;
            let fro = evaluate(&model, &tgt, MaskMode::Frozen)?.overall_accuracy;
            let ks: Vec<usize> = model.history.iter().map(|h| h.k).collect();
            let last = model.history.last().unwrap();
            line.push_str(&format!(
                "\n  {}={:.3}/{:.3} curve={:?} ({:.1}s, K={:?}, mu={:.3}, val={:.3}, dom={:.3}, ovl={:.2})",
                v.name(),
                rec,
                fro,
                curve,
                t.elapsed().as_secs_f64(),
                ks,
                last.mu,
                last.val_acc.unwrap_or(f64::NAN),
                last.losses.dom,
                last.mask_overlap
            ));
        }
        println!("{line}");
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
