//! Temporary measurement binary used while tuning training/eval constants.
//! Not part of the shipped toolkit.

use std::path::Path;
use std::time::Instant;

use rdc_core::attack::{self, AttackConfig, AttackTarget};
use rdc_core::codec::{AdvMode, AugmentMode, CodecConfig, CodecModel, TrainConfig};
use rdc_core::defense;
use rdc_core::metrics;
use rdc_core::seed;
use rdc_core::tensor::Tensor;
use rdc_harness::dataset::ingest_dataset;

static mut START: Option<Instant> = None;

fn stamp() -> f64 {
    unsafe {
        let s = (*std::ptr::addr_of!(START)).unwrap();
        s.elapsed().as_secs_f64()
    }
}

macro_rules! log {
    ($($arg:tt)*) => {
        println!("[{:7.1}s] {}", stamp(), format!($($arg)*));
    };
}

fn bpp(model: &CodecModel, x: &Tensor) -> f64 {
    let (_, h, w) = x.dims3("bpp").unwrap();
    let bs = model.compress(x, 0).unwrap();
    (bs.total_bytes() * 8) as f64 / (h * w) as f64
}

fn recon_mse(model: &CodecModel, clean: &Tensor, input: &Tensor) -> f64 {
    let bs = model.compress(input, 0).unwrap();
    let r = model.decompress(&bs).unwrap();
    metrics::mse(clean, &r).unwrap()
}

/// Pinned-recipe rate attack ratio (sum over images), optionally printing the
/// per-image table.
fn rate_ratio(model: &CodecModel, images: &[(String, Tensor)], iters: usize, table: bool) -> f64 {
    let mut sum_clean = 0.0;
    let mut sum_adv = 0.0;
    for (i, (id, x)) in images.iter().enumerate() {
        let cfg = AttackConfig {
            eps: 4.0 / 255.0,
            alpha: 2.0 / 255.0,
            iters,
            target: AttackTarget::Rate,
            eot_samples: 0,
            seed: seed::substream(7, &format!("s6:rate{iters}"), i as u64),
        };
        let adv = attack::pgd(model, x, &cfg).unwrap();
        let (c, a) = (bpp(model, x), bpp(model, &adv));
        sum_clean += c;
        sum_adv += a;
        if table {
            println!(
                "    {id}: clean {c:.4} adv {a:.4} ratio {:.3} delta {:.4}",
                a / c,
                a - c
            );
        }
    }
    sum_adv / sum_clean
}

fn crit5(model: &CodecModel, images: &[(String, Tensor)]) {
    let ratio = rate_ratio(model, images, 50, true);
    log!("  crit5 rate RATIO {ratio:.4}");
    let mut mc = 0.0;
    let mut ma = 0.0;
    for (i, (_, x)) in images.iter().enumerate() {
        let cfg = AttackConfig {
            eps: 4.0 / 255.0,
            alpha: 2.0 / 255.0,
            iters: 50,
            target: AttackTarget::Distortion,
            eot_samples: 0,
            seed: seed::substream(7, "s6:dist", i as u64),
        };
        let adv = attack::pgd(model, x, &cfg).unwrap();
        mc += recon_mse(model, x, x);
        ma += recon_mse(model, x, &adv);
    }
    log!("  crit5 distortion: mse ratio {:.3}", ma / mc);
}

/// Defense engagement on the 128px subset at a given attack radius, with the
/// measured-bpp view needed for the histogram criterion.
fn engagement(model: &CodecModel, images: &[(String, Tensor)], eps_num: u32) -> usize {
    let eps = eps_num as f32 / 255.0;
    let mut wins2 = 0;
    let mut at = [0.0f64; 4]; // selected loss means at K = 1, 2, 4, 8
    let mut id_clean = 0.0;
    let mut id_adv = 0.0;
    let mut undef_bpp_max: f64 = 0.0;
    let mut def_bpp_max: f64 = 0.0;
    for (i, (id, x)) in images.iter().enumerate() {
        let cfg = AttackConfig {
            eps,
            alpha: eps / 2.0,
            iters: 50,
            target: AttackTarget::Rd,
            eot_samples: 0,
            seed: seed::substream(7, &format!("s6:eng{eps_num}"), i as u64),
        };
        let adv = attack::pgd(model, x, &cfg).unwrap();
        let clean_plain = defense::encode_plain(model, x).unwrap().losses[0];
        let mut rng = seed::rng(7, &format!("s6:karm{eps_num}"), i as u64);
        let k8 = defense::encode_k_way(model, &adv, &mut rng, 8).unwrap();
        let l = &k8.losses;
        id_clean += clean_plain;
        id_adv += l[0];
        for (ki, &k) in [1usize, 2, 4, 8].iter().enumerate() {
            at[ki] += l[..k].iter().cloned().fold(f64::INFINITY, f64::min);
        }
        if defense::select(&l[..2]) != 0 {
            wins2 += 1;
        }
        // bpp view: undefended attacked vs two-way attacked (same draws as k8 prefix)
        let undef_bpp = bpp(model, &adv);
        let mut rng = seed::rng(7, &format!("s6:karm{eps_num}"), i as u64);
        let tw = defense::encode_two_way(model, &adv, &mut rng).unwrap();
        undef_bpp_max = undef_bpp_max.max(undef_bpp);
        def_bpp_max = def_bpp_max.max(tw.record.rate_bpp);
        println!(
            "    {id}: clean {clean_plain:.3} id-adv {:.3} (x{:.2}) | bpp undef {undef_bpp:.3} def {:.3} (chosen {})",
            l[0],
            l[0] / clean_plain,
            tw.record.rate_bpp,
            tw.chosen
        );
    }
    let n = images.len() as f64;
    log!(
        "  eng eps={eps_num}/255: inflation x{:.3} | wins2 {wins2}/{} | K sel {:.3}/{:.3}/{:.3}/{:.3} g12 {:.3} g48 {:.3} | bpp max undef {undef_bpp_max:.3} def {def_bpp_max:.3}",
        id_adv / id_clean,
        images.len(),
        at[0] / n,
        at[1] / n,
        at[2] / n,
        at[3] / n,
        (at[0] - at[1]) / n,
        (at[2] - at[3]) / n,
    );
    wins2
}

fn eot_probe(model: &CodecModel, images: &[(String, Tensor)], eps_num: u32) {
    let eps = eps_num as f32 / 255.0;
    let mut vsum = 0.0;
    let mut esum = 0.0;
    for (i, (id, x)) in images.iter().enumerate() {
        let base = AttackConfig {
            eps,
            alpha: eps / 2.0,
            iters: 25,
            target: AttackTarget::Rd,
            eot_samples: 0,
            seed: seed::substream(7, &format!("s6:eot{eps_num}"), i as u64),
        };
        let adv_v = attack::pgd(model, x, &base).unwrap();
        let adv_e = attack::pgd(
            model,
            x,
            &AttackConfig {
                eot_samples: 24,
                ..base
            },
        )
        .unwrap();
        let mut r1 = seed::rng(7, "s6:eotd", i as u64);
        let dv = defense::encode_two_way(model, &adv_v, &mut r1).unwrap();
        let mut r2 = seed::rng(7, "s6:eotd", i as u64);
        let de = defense::encode_two_way(model, &adv_e, &mut r2).unwrap();
        println!(
            "    {id}: vanilla def {:.3} (chosen {}) eot def {:.3} (chosen {})",
            dv.record.rd_loss, dv.chosen, de.record.rd_loss, de.chosen
        );
        vsum += dv.record.rd_loss;
        esum += de.record.rd_loss;
    }
    log!(
        "  eot eps={eps_num}/255 m=24: vanilla-def {:.3} vs eot-def {:.3} ({})",
        vsum / images.len() as f64,
        esum / images.len() as f64,
        if esum >= vsum { "OK" } else { "WRONG WAY" }
    );
}

fn main() {
    unsafe {
        START = Some(Instant::now());
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let ds = ingest_dataset(&dir, None).unwrap();
    let all: Vec<(String, Tensor)> = ds.images.iter().map(|d| (d.id.clone(), d.image.clone())).collect();
    let big: Vec<(String, Tensor)> = all[18..24].to_vec();
    let tensors: Vec<Tensor> = all.iter().map(|(_, x)| x.clone()).collect();
    log!("corpus {} images ({} at 128px)", all.len(), big.len());

    let variants: [(&str, f32, usize); 4] = [
        ("l1000-e300", 1000.0, 300),
        ("l2500-e300", 2500.0, 300),
        ("l300-e300", 300.0, 300),
        ("l1000-e150", 1000.0, 150),
    ];
    for (tag, lambda, epochs) in variants {
        let mut model = CodecModel::seeded(
            CodecConfig {
                cmid: 16,
                cy: 24,
                lambda,
            },
            7,
        );
        let tc = TrainConfig {
            epochs,
            batch_size: 8,
            lr: 3e-3,
            seed: 7,
            adversarial: AdvMode::Off,
            augment: AugmentMode::Off,
        };
        let s = Instant::now();
        let report = model.train(&tensors, &tc).unwrap();
        let sig: Vec<f32> = model.log_scale.data().iter().map(|v| v.exp()).collect();
        let mut sg = sig.clone();
        sg.sort_by(|a, b| a.partial_cmp(b).unwrap());
        log!(
            "{tag} trained in {:.0}s (final rd {:.3}, sigma med {:.3})",
            s.elapsed().as_secs_f64(),
            report.epoch_rd.last().unwrap(),
            sg[sg.len() / 2]
        );
        crit5(&model, &all);
        engagement(&model, &big, 12);
        if tag == "l1000-e300" {
            let r25 = rate_ratio(&model, &all, 25, false);
            log!("  rate ratio at 25 iters: {r25:.4} (saturation check)");
            eot_probe(&model, &big[..3], 12);
        }
    }
    log!("done");
}
