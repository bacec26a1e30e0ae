//! One-off calibration runs for the acceptance experiments (ignored).

use std::time::Instant;

use mvpt_core::downstream::{
    run_label_efficiency, template_population_correlation, FinetuneConfig, TaskKind,
};
use mvpt_core::stats::moving_average;
use mvpt_core::synthgen::{gen_study, GenConfig};
use mvpt_core::trainer::{run_pretrain_with_hook, HookAction, PretrainConfig};
use mvpt_core::volume::Study;

fn dataset(seed: u64, n: usize) -> (mvpt_core::volume::ModalityRegistry, Vec<Study>) {
    let cfg = GenConfig {
        seed,
        ..Default::default()
    };
    let registry = cfg.registry().unwrap();
    let studies = (0..n).map(|i| gen_study(&cfg, i).unwrap()).collect();
    (registry, studies)
}

#[test]
#[ignore]
fn calibrate_template_distillation_and_training_behavior() {
    let (registry, studies) = dataset(42, 64);
    let cfg = PretrainConfig {
        seed: 1234,
        ..Default::default()
    };
    let num_mod = 3;
    let start = Instant::now();
    let mut curves: Vec<Vec<f64>> = vec![Vec::new(); num_mod];
    let out = run_pretrain_with_hook(&cfg, &registry, &studies, |ctx| {
        for m in 0..num_mod {
            let rho = template_population_correlation(ctx.bank, &studies, m).unwrap();
            curves[m].push(rho);
        }
        HookAction::Continue
    })
    .unwrap();
    let elapsed = start.elapsed();
    eprintln!("pretrain 150 epochs took {elapsed:.2?}");
    for (m, curve) in curves.iter().enumerate() {
        let smooth = moving_average(curve, 10);
        let mut max_drop = 0.0f64;
        for w in smooth.windows(2) {
            max_drop = max_drop.max(w[0] - w[1]);
        }
        eprintln!(
            "modality {m}: final corr {:.4}, smoothed final {:.4}, max smoothed drop {:.2e}",
            curve.last().unwrap(),
            smooth.last().unwrap(),
            max_drop
        );
    }
    let ssl: Vec<f64> = out.log.records.iter().map(|r| r.l_ssl).collect();
    let smooth = moving_average(&ssl, 10);
    eprintln!(
        "L_SSL smoothed: step10 {:.5}, step200 {:.5}, ratio {:.3}",
        smooth[9],
        smooth[199],
        smooth[199] / smooth[9]
    );
    let cmr: Vec<f64> = out.log.records.iter().map(|r| r.l_cmr).collect();
    let scm = moving_average(&cmr, 10);
    eprintln!("L_CMR smoothed: step10 {:.5} step200 {:.5} final {:.5}", scm[9], scm[199], *scm.last().unwrap());
}

#[test]
#[ignore]
fn calibrate_label_efficiency_margin() {
    let (registry, studies) = dataset(42, 64);
    let train: Vec<Study> = studies[..38].to_vec();
    let test: Vec<Study> = studies[44..].to_vec();

    // Pretrain on the train split only.
    let pre_cfg = PretrainConfig {
        seed: 77,
        ..Default::default()
    };
    let t0 = Instant::now();
    let pre = mvpt_core::trainer::run_pretrain(&pre_cfg, &registry, &train).unwrap();
    eprintln!("pretrain(38 studies) took {:.2?}", t0.elapsed());
    let mut bank = pre.bank;
    bank.freeze();

    let labeled: Vec<Study> = train[..8].to_vec();
    for epochs in [15usize, 25, 40] {
        let ft = FinetuneConfig {
            task: TaskKind::Segmentation,
            epochs,
            label_fractions: vec![1.0],
            seed: 5,
            ..Default::default()
        };
        let t1 = Instant::now();
        let rows = run_label_efficiency(
            &ft,
            Some((&pre.model, &pre_cfg.net)),
            &labeled,
            &test,
            &bank,
            &[1, 2, 3],
        )
        .unwrap();
        for row in &rows {
            eprintln!(
                "epochs {epochs}: {} dice mean {:.4} per-seed {:?}",
                row.init, row.mean, row.per_seed
            );
        }
        let scratch = rows.iter().find(|r| r.init == "scratch").unwrap().mean;
        let pretrained = rows.iter().find(|r| r.init == "pretrained").unwrap().mean;
        eprintln!(
            "epochs {epochs}: margin {:.4} (took {:.2?})",
            pretrained - scratch,
            t1.elapsed()
        );
    }
}
