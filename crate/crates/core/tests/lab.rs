//! One full lab run on seed 0, shared by the checks below.

use std::sync::OnceLock;

use siu_core::exposurelab::{finetune_branch, make_world, mixture_probe, run_experiment_on, LabConfig, LabOutcome, Objective, SyntheticWorld};
use siu_core::templates::NONE_CONTEXT;
use siu_core::ToyBackend;

struct Run {
    cfg: LabConfig,
    world: SyntheticWorld,
    out: LabOutcome,
}

fn run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = LabConfig::default().with_seed(0);
        let world = make_world(cfg.n_entities, cfg.n_updated, cfg.seed).unwrap();
        let out = run_experiment_on(&world, &cfg).unwrap();
        Run { cfg, world, out }
    })
}

#[test]
fn pretraining_prefers_every_old_value() {
    let r = &run().out.report;
    assert!(r.pretrain_converged);
    assert_eq!(r.pretrain_entities.len(), r.n_updated);
    for (i, &(old, new)) in r.pretrain_entities.iter().enumerate() {
        assert!(old > 10.0 * new, "entity {i}: P(old) {old} vs P(new) {new}");
    }
}

#[test]
fn branches_are_isolated() {
    let Run { cfg, world, out } = run();
    let alone = finetune_branch(world, &out.pretrained, &out.tokenizer, Objective::ContextAware, cfg).unwrap();
    assert_eq!(alone.checkpoint.model.params(), out.context_aware.model.params());
    assert_eq!(alone.curve, out.report.context_aware);
    assert_ne!(out.naive.model.params(), out.context_aware.model.params());
    for ck in [&out.naive, &out.context_aware] {
        assert_ne!(ck.model.params(), out.pretrained.model.params());
    }
}

#[test]
fn curves_are_complete_and_bounded() {
    let Run { cfg, out, .. } = run();
    let r = &out.report;
    for o in [Objective::Naive, Objective::ContextAware] {
        let c = r.curve(o);
        assert_eq!(c.len(), cfg.finetune.max_steps / cfg.checkpoint_every + 1);
        assert_eq!(c[0].step, 0);
        for p in c {
            assert!((0.0..=1.0).contains(&p.p_old) && (0.0..=1.0).contains(&p.p_new));
            assert!(p.p_old + p.p_new <= 1.0 + 1e-12, "old and new values are distinct continuations");
        }
    }
}

/// An article stating the new value is stronger evidence for it than no context.
#[test]
fn article_context_raises_new_value() {
    let Run { world, out, .. } = run();
    let backend = ToyBackend::new(out.context_aware.model.clone(), out.tokenizer.clone()).unwrap();
    let mut raised = 0;
    let updated = world.updated();
    for &e in &updated {
        let article = world.article(e).unwrap().body;
        let new = world.new_values[e].as_deref().unwrap();
        let m = mixture_probe(&backend, &world.question(e), new, &[article, NONE_CONTEXT.to_string()], None).unwrap();
        let (with, without) = (m.conditionals[0], m.conditionals[1]);
        assert!((m.mixture - 0.5 * (with + without)).abs() < 1e-12);
        raised += usize::from(with > without);
    }
    assert!(raised * 2 > updated.len(), "article raised P(new) for only {raised}/{}", updated.len());
}
