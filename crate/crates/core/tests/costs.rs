use std::path::Path;

use proptest::prelude::*;
use tokprune_core::config::load_config;
use tokprune_core::flops::{block_flops, prefill_flops, BlockShape, CostModel};
use tokprune_core::pipeline::Pipeline;
use tokprune_core::trace::RetentionMode;
use tokprune_core::PruneError;

/// Block cost written out from the counting convention.
fn oracle_block(n: u64, d: u64, dff: u64, h: u64) -> u64 {
    let macs = 4 * n * d * d + 2 * n * n * d + 2 * n * d * dff;
    let elementwise = h * n * n + 2 * n * d + n * dff;
    2 * macs + 5 * elementwise
}

fn shape_strategy() -> impl Strategy<Value = BlockShape> {
    (1u64..6, 1u64..16, 1u64..64).prop_map(|(heads, per_head, mlp_dim)| BlockShape {
        dim: heads * per_head,
        mlp_dim,
        heads,
    })
}

proptest! {
    #[test]
    fn block_cost_strictly_increases_with_tokens(shape in shape_strategy(), n in 0u64..500) {
        prop_assert!(block_flops(shape, n + 1) > block_flops(shape, n));
        prop_assert_eq!(block_flops(shape, n), oracle_block(n, shape.dim, shape.mlp_dim, shape.heads));
    }

    #[test]
    fn prefill_strictly_increases_with_visual_tokens(shape in shape_strategy(), depth in 1usize..8, v in 0u64..300, t in 0u64..40) {
        prop_assert!(prefill_flops(shape, depth, v + 1, t) > prefill_flops(shape, depth, v, t));
        prop_assert_eq!(prefill_flops(shape, depth, v, t), depth as u64 * oracle_block(v + t, shape.dim, shape.mlp_dim, shape.heads));
    }
}

fn small_run() -> (Pipeline, tokprune_core::pipeline::InstanceRun) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    let p = Pipeline::new(load_config(&path).unwrap()).unwrap();
    let plan = p.plan(&p.probe().unwrap()).unwrap();
    let s3 = p.stage3_config(RetentionMode::Fixed, &p.config().stage3.lambdas);
    let run = p.run_instance(0, 0.0, &plan, &s3).unwrap();
    (p, run)
}

#[test]
fn trace_cost_matches_counts_observed_in_the_run() {
    let (p, run) = small_run();
    let cfg = p.config();
    let model = p.cost_model();
    let report = model.pipeline_cost(&run.trace()).unwrap();

    let mut encoding = 0;
    let mut projection = 0;
    for (e, s1) in cfg.encoders.iter().zip(&run.fused.stage1) {
        let (d, dff, h) = (e.dim as u64, e.spec().mlp_dim as u64, e.num_heads as u64);
        encoding += 2 * e.token_count as u64 * d * d;
        for &n in &s1.block_token_counts {
            encoding += oracle_block(n as u64 + 1, d, dff, h);
        }
        let n = s1.output.token_count() as u64;
        let (hid, out) = (cfg.stage2.projector_hidden as u64, cfg.decoder.dim as u64);
        projection += 2 * (n * d * hid + n * hid * out) + 5 * n * hid;
    }
    let fused = run.fused.fused.rows() as u64;
    let fusion = 2 * 3 * fused * cfg.decoder.dim as u64;
    let dec = &cfg.decoder;
    let prefill: u64 = run
        .stage3
        .layer_visual_counts
        .iter()
        .map(|&v| oracle_block((v + dec.text_tokens) as u64, dec.dim as u64, dec.mlp_dim as u64, dec.num_heads as u64))
        .sum();

    assert_eq!(report.per_stage_flops["encoding"], encoding);
    assert_eq!(report.per_stage_flops["projection"], projection);
    assert_eq!(report.per_stage_flops["fusion"], fusion);
    assert_eq!(report.per_stage_flops["prefill"], prefill);
    assert_eq!(report.total_flops, encoding + projection + fusion + prefill);
    assert!(report.reduction_fraction > 0.0 && report.reduction_fraction < 1.0);
}

#[test]
fn pruned_stages_never_cost_more_than_the_baseline() {
    let (p, run) = small_run();
    let model: CostModel = p.cost_model();
    let pruned = model.stage_flops(&model.profile_from_trace(&run.trace()).unwrap()).unwrap();
    let base = model.stage_flops(&model.baseline_profile()).unwrap();
    for stage in ["encoding", "projection", "prefill"] {
        assert!(pruned[stage] < base[stage], "{stage}");
    }
    assert_eq!(base["fusion"], 0);
}

#[test]
fn trace_that_skips_tokens_is_rejected() {
    let (p, run) = small_run();
    let mut trace = run.trace();
    let last = trace.entries.len() - 1;
    trace.entries[last].tokens_before += 1;
    assert!(matches!(
        p.cost_model().pipeline_cost(&trace),
        Err(PruneError::InvalidTrace(_))
    ));
}

#[test]
fn noop_config_keeps_everything_at_no_saving() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    let mut c = load_config(&path).unwrap();
    let all = c.total_tokens();
    c.stage1.totals = Some(vec![all; 3]);
    c.stage2.k = all;
    c.reference_visual_tokens = all;
    c.stage3.schedule.clear();
    c.stage3.fixed_counts.clear();
    c.stage3.lambdas.clear();
    c.stage3.calibration_targets.clear();
    let report = Pipeline::new(c).unwrap().run(None).unwrap();
    assert_eq!(report.retained.final_count, all);
    assert_eq!(report.tokens.token_reduction, 0.0);
    assert_eq!(report.cost.reduction_fraction, 0.0);
    assert_eq!(report.cost.per_stage_flops["fusion"], 0);
}
