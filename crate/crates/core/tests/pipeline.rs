use std::fs;

use asrkit::am::TrainConfig;
use asrkit::corpus::SynthSpec;
use asrkit::pipeline::{
    compare, hash_tree, run_plan, CellRef, CellStatus, Claim, CorpusSource, ExperimentPlan, Recipe, RecipeKind,
    ResultGrid, Verdict, ARTIFACTS_FILE, CLAIMS_FILE, GRID_FILE,
};
use asrkit::sst::DecodeMode;
use asrkit::unsup::UnsupConfig;

fn tiny_plan(out: &std::path::Path) -> ExperimentPlan {
    let mut plan = ExperimentPlan::default_plan(out);
    plan.corpus = CorpusSource::Synth(SynthSpec {
        n_supervised: 30,
        n_untranscribed: 30,
        n_test: 8,
        n_text: 200,
        vocab_size: 20,
        ..SynthSpec::default()
    });
    let quick = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    plan.supervised = quick.clone();
    plan.sst.train = quick.clone();
    plan.unsup = UnsupConfig {
        k: 6,
        train: quick,
        ..UnsupConfig::default()
    };
    let mut sst2 = Recipe::new("sst2", RecipeKind::Sst);
    sst2.sst_iterations = 2;
    plan.recipes.push(sst2);
    plan
}

fn expected_cells(plan: &ExperimentPlan, domains: usize) -> usize {
    plan.recipes.iter().map(|r| r.rows().len()).sum::<usize>() * plan.decode_modes.len() * domains
}

#[test]
fn grid_covers_every_cell_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(&dir.path().join("one"));
    let grid = run_plan(&plan).unwrap();
    assert_eq!(grid.cells.len(), expected_cells(&plan, 2));
    for r in &plan.recipes {
        for row in r.rows() {
            for &m in &plan.decode_modes {
                for d in ["A", "B"] {
                    let c = grid.get(&row, m, d).unwrap_or_else(|| panic!("{row}/{m}/{d}"));
                    match c.status {
                        CellStatus::Ok => assert!(c.wer.is_some_and(f64::is_finite)),
                        CellStatus::Failed => assert!(c.reason.is_some()),
                    }
                }
            }
        }
    }
    let out = &plan.output_dir;
    let loaded = ResultGrid::load(out.join(GRID_FILE)).unwrap();
    assert_eq!((&loaded.cells, &loaded.seeds), (&grid.cells, &grid.seeds));
    assert!(grid.get("sst2/iter2", DecodeMode::Greedy, "B").is_some());
    assert_eq!(grid.seeds["corpus"], SynthSpec::default().seed);
    let claims: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(CLAIMS_FILE)).unwrap()).unwrap();
    assert!(!claims.as_array().unwrap().is_empty());

    let mut again = plan.clone();
    again.output_dir = dir.path().join("two");
    run_plan(&again).unwrap();
    let a = fs::read(out.join(ARTIFACTS_FILE)).unwrap();
    let b = fs::read(again.output_dir.join(ARTIFACTS_FILE)).unwrap();
    assert_eq!(a, b);
    assert_eq!(hash_tree(out).unwrap(), hash_tree(&again.output_dir).unwrap());
}

#[test]
fn stage_failures_mark_cells_and_the_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(&dir.path().join("run"));
    plan.recipes.truncate(2);
    plan.graph_lexicon = Some(dir.path().join("no_such_lexicon.tsv"));
    let grid = run_plan(&plan).unwrap();
    assert_eq!(grid.cells.len(), expected_cells(&plan, 2));
    for c in &grid.cells {
        if c.mode == DecodeMode::CtcWfst {
            assert_eq!(c.status, CellStatus::Failed, "{}/{}", c.recipe, c.domain);
            assert!(c.wer.is_none());
        } else {
            assert_eq!(c.status, CellStatus::Ok, "{}/{}/{:?}", c.recipe, c.mode, c.reason);
        }
    }
    assert_eq!(grid.failed().count(), 2 * 2);
}

#[test]
fn claims_on_missing_cells_are_not_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(&dir.path().join("run"));
    plan.recipes = vec![Recipe::new("supervised", RecipeKind::Supervised)];
    plan.decode_modes = vec![DecodeMode::Greedy];
    plan.claims = Some(vec![
        Claim {
            name: "present".into(),
            lhs: CellRef::new("supervised", DecodeMode::Greedy, "A"),
            rhs: CellRef::new("supervised", DecodeMode::Greedy, "A"),
            margin: 0.0,
            strict: false,
        },
        Claim {
            name: "absent".into(),
            lhs: CellRef::new("sst", DecodeMode::Greedy, "B"),
            rhs: CellRef::new("supervised", DecodeMode::Greedy, "B"),
            margin: 0.0,
            strict: false,
        },
    ]);
    let grid = run_plan(&plan).unwrap();
    let res = compare(&grid, plan.claims.as_ref().unwrap());
    assert_eq!(res[0].verdict, Verdict::Pass);
    assert_eq!(res[1].verdict, Verdict::NotEvaluable);
    assert!(res[1].detail.contains("sst/greedy/B"), "{}", res[1].detail);
}

#[test]
fn invalid_plans_and_overlapping_corpora_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(&dir.path().join("run"));
    plan.recipes.push(Recipe::new("sst", RecipeKind::Sst));
    assert!(plan.validate().is_err());
    let mut plan = tiny_plan(&dir.path().join("run"));
    plan.recipes.clear();
    assert!(run_plan(&plan).is_err());

    // A corpus directory whose test set repeats a training id.
    let corpus = dir.path().join("corpus");
    let synth = asrkit::corpus::synthesize_corpus(&SynthSpec {
        n_supervised: 6,
        n_untranscribed: 4,
        n_test: 3,
        n_text: 40,
        ..SynthSpec::default()
    })
    .unwrap();
    synth.write(&corpus).unwrap();
    let sup = fs::read_to_string(corpus.join("supervised.jsonl")).unwrap();
    let first = sup.lines().next().unwrap();
    let test_a = corpus.join("test_A.jsonl");
    let mut text = fs::read_to_string(&test_a).unwrap();
    text.push_str(first);
    text.push('\n');
    fs::write(&test_a, text).unwrap();
    let loaded = asrkit::pipeline::LoadedCorpus::from_dir(&corpus).unwrap();
    assert!(loaded.check_disjoint().is_err());
    let mut plan = tiny_plan(&dir.path().join("run2"));
    plan.corpus = CorpusSource::Dir(corpus);
    assert!(run_plan(&plan).is_err());
}
