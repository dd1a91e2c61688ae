//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its elapsed time once its assertions hold.
//!
//! The two long-running criteria (level trend, pipeline determinism) share
//! a lock so their runtime bounds are measured without mutual interference.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use magdi_lab::checkpoint::{load_checkpoint, strip_head};
use magdi_lab::distill::{
    evaluate_combined_loss, mag_loss, margin_loss, DistillHead, HeadConfig, LossWeights,
    MagLossSpec,
};
use magdi_lab::eval::{
    efficiency_report, evaluate, majority_vote, reference_token_cost, self_consistency,
    summarize_levels,
};
use magdi_lab::graph::{
    build_mag, corpus_stats, filter_corpus, EdgeVariant, InstanceRef, Mag, StructureClass,
};
use magdi_lab::model::{DecodeMode, ModelConfig, StudentModel, Vocab};
use magdi_lab::seeding::rng_for;
use magdi_lab::sim::{
    gen_corpus_mags, gen_testset, instance_from_operands, AgentProfile, SimConfig, TaskFamily,
};
use magdi_lab::tensor::{grad_check, GradCheckConfig, ParamSet, Tape, Tensor};
use magdi_lab::train::{train_on_graphs, Level, TrainConfig};

static HEAVY: Mutex<()> = Mutex::new(());

fn finish(criterion: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    println!(
        "acceptance {criterion}: PASS ({:.2}s, budget {:.0}s)",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(
        elapsed <= budget,
        "{criterion} exceeded its runtime budget: {elapsed:?} > {budget:?}"
    );
}

fn instance() -> InstanceRef {
    instance_from_operands(TaskFamily::Modsum, "fixture", [3, 5, 9]).to_ref()
}

/// Valid graph with the requested number of post-initial rounds.
fn graph_with_rounds(rounds: usize, n_agents: usize) -> Mag {
    let per_round: Vec<Vec<(String, String)>> = (0..=rounds)
        .map(|_| {
            (0..n_agents)
                .map(|_| ("3+5=8; 8+9=17; 17 mod 10 = 7".to_string(), "7".to_string()))
                .collect()
        })
        .collect();
    build_mag(instance(), &per_round).unwrap()
}

#[test]
fn criterion_01_graph_structure_exactness() {
    let started = Instant::now();
    // One round of interaction between three agents: 6 nodes and 9 edges.
    let one_round = graph_with_rounds(1, 3);
    assert_eq!(one_round.nodes.len(), 6);
    assert_eq!(one_round.edges.len(), 9);
    // Consensus at the start: 3 disconnected nodes.
    let consensus = graph_with_rounds(0, 3);
    assert_eq!(consensus.nodes.len(), 3);
    assert_eq!(consensus.edges.len(), 0);
    // Property over random agent/round counts: |edges| = n^2 * r and
    // |nodes| = n * (r + 1).
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let n = rng.gen_range(1..=5);
        let r = rng.gen_range(0..=3);
        let mag = graph_with_rounds(r, n);
        assert_eq!(mag.edges.len(), n * n * r);
        assert_eq!(mag.nodes.len(), n * (r + 1));
    }
    finish("01 graph-structure-exactness", started, Duration::from_secs(1));
}

/// Synthetic corpus with the given per-structure graph counts.
fn corpus_with_structures(counts: [usize; 4]) -> Vec<Mag> {
    let mut corpus = Vec::new();
    for (rounds, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            corpus.push(graph_with_rounds(rounds, 3));
        }
    }
    corpus
}

#[test]
fn criterion_02_training_corpus_round_counts() {
    let started = Instant::now();
    // Five benchmark-shaped fixtures: structure counts and the exact
    // round-node counts they must reproduce.
    let rows: [(&str, [usize; 4], [usize; 4]); 5] = [
        ("strategyqa", [719, 135, 112, 34], [3000, 843, 438, 102]),
        ("csqa", [306, 380, 105, 209], [3000, 2082, 942, 627]),
        ("arc-c", [736, 168, 45, 51], [3000, 792, 288, 153]),
        ("gsm8k", [557, 247, 78, 118], [3000, 1329, 588, 354]),
        ("math", [215, 269, 89, 427], [3000, 2355, 1548, 1281]),
    ];
    for (name, structures, expected_rounds) in rows {
        let corpus = corpus_with_structures(structures);
        let stats = corpus_stats(&corpus).unwrap();
        assert_eq!(stats.graphs_per_structure, structures, "{name}");
        assert_eq!(stats.nodes_per_round, expected_rounds, "{name}");
        assert_eq!(stats.n_graphs, 1000, "{name}");
        // Round formula: nodes_per_round[j] = n * #graphs with >= j rounds.
        for j in 1..4 {
            let tail: usize = structures[j..].iter().sum();
            assert_eq!(stats.nodes_per_round[j], 3 * tail, "{name} round {j}");
        }
    }
    // Dropping the densest graphs from the first fixture leaves 966.
    let strategyqa = corpus_with_structures([719, 135, 112, 34]);
    let without_g3 = filter_corpus(&strategyqa, |c| c != StructureClass::G3);
    assert_eq!(without_g3.len(), 966);
    let without_g2_g3 = filter_corpus(&strategyqa, |c| {
        c != StructureClass::G2 && c != StructureClass::G3
    });
    assert_eq!(without_g2_g3.len(), 854);
    finish("02 corpus-round-counts", started, Duration::from_secs(1));
}

/// Random tensor with entries kept away from nonlinearity kinks.
fn kink_safe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if v.abs() < 0.05 {
                0.05 * v.signum() + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn criterion_03_gradient_fidelity() {
    let started = Instant::now();
    let tolerance = 1e-4;
    let cfg = GradCheckConfig {
        epsilon: 1e-5,
        max_coords_per_param: 12,
    };

    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.gen_range(2..5);
        let cols = rng.gen_range(2..5);
        let inner = rng.gen_range(2..5);

        let mut params = ParamSet::new();
        let a = params.insert("a", kink_safe(&[rows, inner], &mut rng));
        let b = params.insert("b", kink_safe(&[inner, cols], &mut rng));
        let row = params.insert("row", kink_safe(&[cols], &mut rng));
        let table = params.insert("table", kink_safe(&[4, cols], &mut rng));

        let gather_ix: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..4)).collect();
        let select_ix: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
        let mut mask: Vec<f64> = (0..rows).map(|_| f64::from(rng.gen_bool(0.6))).collect();
        mask[0] = 1.0;
        let slice_hi = rng.gen_range(1..=cols);

        type LossBuilder = Box<dyn Fn(&Tape, &ParamSet) -> magdi_lab::tensor::ValueId>;
        let builders: Vec<(&str, LossBuilder)> = vec![
            ("matmul", Box::new(move |t: &Tape, p: &ParamSet| {
                let x = t.matmul(t.param(p, a), t.param(p, b)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("transpose", Box::new(move |t, p| {
                let x = t.transpose(t.param(p, a)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("add", Box::new(move |t, p| {
                let x = t.add(t.param(p, a), t.param(p, a)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("add_row", Box::new(move |t, p| {
                let base = t.matmul(t.param(p, a), t.param(p, b)).unwrap();
                let x = t.add_row(base, t.param(p, row)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("add_scalar", Box::new(move |t, p| {
                let x = t.add_scalar(t.param(p, a), 0.7).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("mul", Box::new(move |t, p| {
                let x = t.mul(t.param(p, a), t.param(p, a)).unwrap();
                t.sum(x).unwrap()
            })),
            ("mul_row", Box::new(move |t, p| {
                let base = t.matmul(t.param(p, a), t.param(p, b)).unwrap();
                let x = t.mul_row(base, t.param(p, row)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("scale", Box::new(move |t, p| {
                let x = t.scale(t.param(p, a), -1.3).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("tanh", Box::new(move |t, p| {
                let x = t.tanh(t.param(p, a)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("relu", Box::new(move |t, p| {
                let x = t.relu(t.param(p, a)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("log", Box::new(move |t, p| {
                // Square plus offset keeps the argument strictly positive.
                let sq = t.mul(t.param(p, a), t.param(p, a)).unwrap();
                let pos = t.add_scalar(sq, 0.3).unwrap();
                t.sum(t.log(pos).unwrap()).unwrap()
            })),
            ("softmax", Box::new(move |t, p| {
                let x = t.softmax(t.param(p, a)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("layer_norm", Box::new(move |t, p| {
                let x = t.layer_norm(t.param(p, a)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("gather", {
                let gather_ix = gather_ix.clone();
                Box::new(move |t, p| {
                    let x = t.gather(t.param(p, table), &gather_ix).unwrap();
                    t.sum(t.mul(x, x).unwrap()).unwrap()
                })
            }),
            ("row_select", {
                let select_ix = select_ix.clone();
                Box::new(move |t, p| {
                    let base = t.matmul(t.param(p, a), t.param(p, b)).unwrap();
                    let x = t.row_select(base, &select_ix).unwrap();
                    t.sum(t.mul(x, x).unwrap()).unwrap()
                })
            }),
            ("masked_mean_pool", {
                let mask = mask.clone();
                Box::new(move |t, p| {
                    let base = t.matmul(t.param(p, a), t.param(p, b)).unwrap();
                    let x = t.masked_mean_pool(base, &mask).unwrap();
                    t.sum(t.mul(x, x).unwrap()).unwrap()
                })
            }),
            ("concat", Box::new(move |t, p| {
                let lhs = t.param(p, a);
                let rhs = t.param(p, a);
                let x = t.concat(&[lhs, rhs], 0).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("slice", Box::new(move |t, p| {
                let x = t.slice(t.param(p, a), 1, 0, slice_hi.min(inner)).unwrap();
                t.sum(t.mul(x, x).unwrap()).unwrap()
            })),
            ("sum", Box::new(move |t, p| {
                t.sum(t.param(p, a)).unwrap()
            })),
            ("mean", Box::new(move |t, p| {
                let x = t.mul(t.param(p, a), t.param(p, a)).unwrap();
                t.mean(x).unwrap()
            })),
        ];

        for (name, build) in &builders {
            let mut check_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let err = grad_check(
                |p| {
                    let tape = Tape::new();
                    let loss = build(&tape, p);
                    let grads = tape.backward(loss, p)?;
                    Ok((tape.scalar(loss), grads))
                },
                &params,
                cfg,
                &mut check_rng,
            )
            .unwrap();
            assert!(
                err < tolerance,
                "primitive {name} seed {seed}: max relative error {err}"
            );
        }
    }

    // Full combined loss on a toy two-agent, one-round graph.
    for seed in 0..20u64 {
        let per_round = vec![
            vec![
                ("3+5=8; 8+9=17; 17 mod 10 = 7".to_string(), "7".to_string()),
                ("3+5=9; 9+9=18; 18 mod 10 = 8".to_string(), "8".to_string()),
            ],
            vec![
                ("3+5=8; 8+9=17; 17 mod 10 = 7".to_string(), "7".to_string()),
                ("3+5=8; 8+9=17; 17 mod 10 = 7".to_string(), "7".to_string()),
            ],
        ];
        let mag = build_mag(instance(), &per_round).unwrap();
        let cfg_model = ModelConfig {
            width: 8,
            heads: 2,
            layers: 1,
            context: 64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = StudentModel::init(cfg_model, Vocab::default_grammar(), &mut rng).unwrap();
        let head = DistillHead::init(HeadConfig::for_width(8), &mut rng).unwrap();
        let joint = student.params.merged(&head.params);
        let template = StudentModel {
            cfg: student.cfg,
            vocab: student.vocab.clone(),
            params: ParamSet::new(),
        };
        let weights = LossWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
        };
        let spec = MagLossSpec {
            positives: mag.correct_nodes(),
            negatives: mag.incorrect_nodes(),
            adjacency: Some(mag.adjacency(EdgeVariant::Directed).normalized),
        };
        let mut check_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let err = grad_check(
            |p| {
                let tape = Tape::new();
                let mut pair_rng = rng_for(7, "acceptance/pairs");
                let (total, _) = mag_loss(
                    &tape, &mag, &spec, &template, p, 1.0, &weights, true, &mut pair_rng,
                )
                .map_err(|e| match e {
                    magdi_lab::distill::DistillError::Tensor(t) => t,
                    other => panic!("unexpected error: {other}"),
                })?;
                let grads = tape.backward(total, p)?;
                Ok((tape.scalar(total), grads))
            },
            &joint,
            GradCheckConfig {
                epsilon: 1e-5,
                max_coords_per_param: 4,
            },
            &mut check_rng,
        )
        .unwrap();
        assert!(err < tolerance, "combined loss seed {seed}: error {err}");
    }
    finish("03 gradient-fidelity", started, Duration::from_secs(60));
}

#[test]
fn criterion_04_loss_identities() {
    let started = Instant::now();
    // Alpha-only combination reduces to the positive loss exactly.
    let per_round = vec![
        vec![
            ("3+5=8; 8+9=17; 17 mod 10 = 7".to_string(), "7".to_string()),
            ("3+5=9; 9+9=18; 18 mod 10 = 8".to_string(), "8".to_string()),
            ("3+5=8; 8+9=17; 17 mod 10 = 7".to_string(), "7".to_string()),
        ],
        vec![
            ("3+5=8; 8+9=17; 17 mod 10 = 7".to_string(), "7".to_string()),
            ("3+5=8; 8+9=17; 17 mod 10 = 7".to_string(), "7".to_string()),
            ("3+5=8; 8+9=17; 17 mod 10 = 7".to_string(), "7".to_string()),
        ],
    ];
    let mag = build_mag(instance(), &per_round).unwrap();
    let cfg = ModelConfig {
        width: 8,
        heads: 2,
        layers: 1,
        context: 64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let student = StudentModel::init(cfg, Vocab::default_grammar(), &mut rng).unwrap();
    let head = DistillHead::init(HeadConfig::for_width(8), &mut rng).unwrap();
    let alpha_only = LossWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    };
    let mut pair_rng = rng_for(3, "acc4");
    let b = evaluate_combined_loss(
        &mag,
        &student,
        &head,
        &alpha_only,
        EdgeVariant::Directed,
        &mut pair_rng,
    )
    .unwrap();
    assert_eq!(b.total, b.positive, "alpha-only total must equal L+ exactly");

    // Margin loss: zero on fully separated scores, exactly rho at equality.
    let margin_case = |sp: f64, sm: f64, rho: f64| {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 1, vec![sp]).unwrap());
        let m = tape.leaf(Tensor::matrix(1, 1, vec![sm]).unwrap());
        tape.scalar(margin_loss(&tape, p, m, rho).unwrap())
    };
    assert_eq!(margin_case(1.0, -1.0, 1.0), 0.0);
    assert_eq!(margin_case(0.4, 0.4, 1.0), 1.0);
    assert_eq!(margin_case(0.4, 0.4, 0.25), 0.25);

    // Uniform-logit cross-entropies: ln V for next-token, ln 2 for node
    // classification (zero and freshly initialized parameters give exactly
    // uniform distributions).
    let zero_student = StudentModel::init_zero(cfg, Vocab::default_grammar()).unwrap();
    let tape = Tape::new();
    let q = zero_student.vocab.encode("3+5+9 mod 10 = ?").unwrap();
    let chain = zero_student
        .vocab
        .chain_ids("3+5=8; 8+9=17; 17 mod 10 = 7", "7")
        .unwrap();
    let loss = zero_student
        .positive_loss(&tape, &zero_student.params, &[(q, chain)])
        .unwrap();
    let v = zero_student.vocab.size() as f64;
    assert!((tape.scalar(loss) - v.ln()).abs() < 1e-10, "ln V identity");

    let mut fresh_rng = ChaCha8Rng::seed_from_u64(5);
    let fresh_head = DistillHead::init(HeadConfig::for_width(8), &mut fresh_rng).unwrap();
    let b = evaluate_combined_loss(
        &mag,
        &student,
        &fresh_head,
        &LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        },
        EdgeVariant::Directed,
        &mut rng_for(4, "acc4"),
    )
    .unwrap();
    let li = b.interaction.expect("graph term evaluated");
    assert!((li - 2.0f64.ln()).abs() < 1e-10, "ln 2 identity, got {li}");
    finish("04 loss-identities", started, Duration::from_secs(1));
}

fn default_profiles() -> Vec<AgentProfile> {
    [0.1, 0.25, 0.4]
        .iter()
        .enumerate()
        .map(|(agent_id, &step_error_rate)| AgentProfile {
            agent_id,
            step_error_rate,
            follow_rate: 0.8,
        })
        .collect()
}

fn default_corpus() -> Vec<Mag> {
    let config = SimConfig {
        family: TaskFamily::Modsum,
        n_instances: 1000,
        n_agents: 3,
        max_rounds: 3,
        profiles: default_profiles(),
        seed: 7,
    };
    gen_corpus_mags(&config).unwrap()
}

fn train_level(
    corpus: &[Mag],
    level: Level,
    seed: u64,
    out_dir: &Path,
) -> magdi_lab::train::TrainOutcome {
    let config = TrainConfig {
        level,
        seed,
        out_dir: out_dir.to_path_buf(),
        epoch_checkpoints: false,
        corpora: vec![PathBuf::from("in-memory")],
        ..TrainConfig::default()
    };
    train_on_graphs(&config, corpus).unwrap()
}

#[test]
fn criterion_05_level_trend_at_desk_scale() {
    let _guard = HEAVY.lock().unwrap();
    let started = Instant::now();
    let corpus = default_corpus();
    let testset = gen_testset(TaskFamily::Modsum, 200, 7);
    let dir = tempfile::tempdir().unwrap();

    let levels = [Level::R0, Level::An, Level::Magdi];
    let mut accuracies: Vec<(String, Vec<f64>)> = levels
        .iter()
        .map(|l| (l.to_string(), Vec::new()))
        .collect();
    for seed in 1..=5u64 {
        for (i, &level) in levels.iter().enumerate() {
            let out = dir.path().join(format!("{level}-s{seed}"));
            let outcome = train_level(&corpus, level, seed, &out);
            let report = evaluate(&outcome.student, &testset, 64).unwrap();
            accuracies[i].1.push(report.accuracy);
            println!("  level {level} seed {seed}: accuracy {:.4}", report.accuracy);
        }
    }
    let comparison = summarize_levels(&accuracies);
    let mean = |name: &str| {
        comparison
            .levels
            .iter()
            .find(|l| l.level == name)
            .unwrap()
            .mean
    };
    let (r0, an, magdi) = (mean("r0"), mean("an"), mean("magdi"));
    println!("  means: r0 {r0:.4}  an {an:.4}  magdi {magdi:.4}");
    assert!(
        magdi >= an && an >= r0,
        "mean ordering violated: magdi {magdi:.4}, an {an:.4}, r0 {r0:.4}"
    );
    let magdi_wins = accuracies[2]
        .1
        .iter()
        .zip(&accuracies[0].1)
        .filter(|(m, r)| m > r)
        .count();
    assert!(
        magdi_wins >= 4,
        "full level beat the round-0 baseline on only {magdi_wins}/5 seeds"
    );
    finish("05 level-trend", started, Duration::from_secs(1800));
}

#[test]
fn criterion_06_inference_parity_without_head() {
    let started = Instant::now();
    let config = SimConfig {
        family: TaskFamily::Modsum,
        n_instances: 40,
        n_agents: 3,
        max_rounds: 3,
        profiles: default_profiles(),
        seed: 11,
    };
    let corpus = gen_corpus_mags(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let train_config = TrainConfig {
        level: Level::Magdi,
        epochs: 2,
        out_dir: dir.path().join("ckpt"),
        epoch_checkpoints: false,
        corpora: vec![PathBuf::from("in-memory")],
        model: ModelConfig {
            width: 16,
            heads: 2,
            layers: 1,
            context: 128,
        },
        ..TrainConfig::default()
    };
    let outcome = train_on_graphs(&train_config, &corpus).unwrap();

    let full_path = outcome.final_checkpoint.clone();
    let bare_path = dir.path().join("bare.magdi");
    strip_head(&full_path, &bare_path).unwrap();

    let (full_student, full_head) = load_checkpoint(&full_path).unwrap();
    let (bare_student, bare_head) = load_checkpoint(&bare_path).unwrap();
    assert!(full_head.is_some());
    assert!(bare_head.is_none());

    let questions = gen_testset(TaskFamily::Modsum, 100, 23);
    for instance in &questions {
        let mut rng_a = rng_for(0, "parity");
        let mut rng_b = rng_for(0, "parity");
        let a = full_student
            .generate(&instance.question, DecodeMode::Greedy, 64, &mut rng_a)
            .unwrap();
        let b = bare_student
            .generate(&instance.question, DecodeMode::Greedy, 64, &mut rng_b)
            .unwrap();
        assert_eq!(a, b, "generation diverged on {}", instance.question);
    }
    finish("06 inference-parity", started, Duration::from_secs(60));
}

#[test]
fn criterion_07_self_consistency_mechanics() {
    let started = Instant::now();
    // SC with k = 1 at temperature 0 equals greedy evaluation exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let student = StudentModel::init(
        ModelConfig {
            width: 16,
            heads: 2,
            layers: 1,
            context: 128,
        },
        Vocab::default_grammar(),
        &mut rng,
    )
    .unwrap();
    let testset = gen_testset(TaskFamily::Modsum, 25, 31);
    let greedy = evaluate(&student, &testset, 48).unwrap();
    let sc = self_consistency(&student, &testset, 1, 0.0, 9, 48).unwrap();
    assert_eq!(greedy, sc, "k=1 temperature-0 SC must equal greedy");

    // Synthetic sampler with independent per-sample accuracy 0.6, k = 9:
    // majority-vote accuracy within ±0.03 of the binomial oracle.
    let k = 9;
    let p: f64 = 0.6;
    let oracle: f64 = (5..=k)
        .map(|i| binomial(k, i) * p.powi(i as i32) * (1.0 - p).powi((k - i) as i32))
        .sum();
    assert!((oracle - 0.7334).abs() < 1e-4, "oracle value: {oracle}");

    let mut trial_rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 10_000;
    let mut correct = 0;
    for _ in 0..trials {
        let answers: Vec<String> = (0..k)
            .map(|_| {
                if trial_rng.gen_bool(p) {
                    "7".to_string()
                } else {
                    "3".to_string()
                }
            })
            .collect();
        if majority_vote(&answers) == "7" {
            correct += 1;
        }
    }
    let sc_accuracy = correct as f64 / trials as f64;
    assert!(
        (sc_accuracy - oracle).abs() <= 0.03,
        "SC accuracy {sc_accuracy} vs oracle {oracle}"
    );
    finish("07 self-consistency", started, Duration::from_secs(60));
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut result = 1.0;
    for i in 0..k {
        result *= (n - i) as f64 / (k - i) as f64;
    }
    result
}

#[test]
fn criterion_08_efficiency_accounting() {
    let started = Instant::now();
    // Published reference inputs reproduce the published reduction factor.
    let fake_examples = vec![
        magdi_lab::eval::ExampleRecord {
            id: "a".into(),
            predicted: "1".into(),
            gold: "1".into(),
            correct: true,
            tokens: 107,
        },
        magdi_lab::eval::ExampleRecord {
            id: "b".into(),
            predicted: "2".into(),
            gold: "2".into(),
            correct: true,
            tokens: 108,
        },
    ];
    let report = magdi_lab::eval::EvalReport {
        accuracy: 1.0,
        mean_generated_tokens: 107.5,
        examples: fake_examples,
    };
    let reduction = efficiency_report(924.5, &report).unwrap();
    assert_eq!(format!("{reduction:.1}x"), "8.6x");

    // The simulated discussion costs more tokens per example than the
    // distilled student spends answering.
    let config = SimConfig {
        family: TaskFamily::Modsum,
        n_instances: 60,
        n_agents: 3,
        max_rounds: 3,
        profiles: default_profiles(),
        seed: 13,
    };
    let corpus = gen_corpus_mags(&config).unwrap();
    let vocab = Vocab::default_grammar();
    let reference = reference_token_cost(&corpus, &vocab).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let train_config = TrainConfig {
        level: Level::Cn,
        epochs: 2,
        out_dir: dir.path().join("ckpt"),
        epoch_checkpoints: false,
        corpora: vec![PathBuf::from("in-memory")],
        model: ModelConfig {
            width: 16,
            heads: 2,
            layers: 1,
            context: 128,
        },
        ..TrainConfig::default()
    };
    let outcome = train_on_graphs(&train_config, &corpus).unwrap();
    let testset = gen_testset(TaskFamily::Modsum, 40, 17);
    let student_report = evaluate(&outcome.student, &testset, 64).unwrap();
    let reduction = efficiency_report(reference, &student_report).unwrap();
    println!(
        "  reference {reference:.1} vs student {:.1}: {reduction:.2}x",
        student_report.mean_generated_tokens
    );
    assert!(reduction > 1.0, "expected a reduction factor above 1");
    finish("08 efficiency-accounting", started, Duration::from_secs(60));
}

#[test]
fn criterion_09_edge_variant_discrimination() {
    let started = Instant::now();
    // G0: identity adjacency for directed and undirected; all-ones for
    // fully-connected.
    let g0 = graph_with_rounds(0, 3);
    let eye3 = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    assert_eq!(g0.adjacency(EdgeVariant::Directed).matrix, eye3);
    assert_eq!(g0.adjacency(EdgeVariant::Undirected).matrix, eye3);
    assert_eq!(
        g0.adjacency(EdgeVariant::FullyConnected).matrix,
        Tensor::matrix(3, 3, vec![1.0; 9]).unwrap()
    );

    // G1 with three agents: rows 0..2 are round-0 nodes, rows 3..5 round-1.
    let g1 = graph_with_rounds(1, 3);
    #[rustfmt::skip]
    let directed = Tensor::matrix(6, 6, vec![
        1., 0., 0., 0., 0., 0.,
        0., 1., 0., 0., 0., 0.,
        0., 0., 1., 0., 0., 0.,
        1., 1., 1., 1., 0., 0.,
        1., 1., 1., 0., 1., 0.,
        1., 1., 1., 0., 0., 1.,
    ]).unwrap();
    assert_eq!(g1.adjacency(EdgeVariant::Directed).matrix, directed);

    #[rustfmt::skip]
    let undirected = Tensor::matrix(6, 6, vec![
        1., 0., 0., 1., 1., 1.,
        0., 1., 0., 1., 1., 1.,
        0., 0., 1., 1., 1., 1.,
        1., 1., 1., 1., 0., 0.,
        1., 1., 1., 0., 1., 0.,
        1., 1., 1., 0., 0., 1.,
    ]).unwrap();
    assert_eq!(g1.adjacency(EdgeVariant::Undirected).matrix, undirected);

    assert_eq!(
        g1.adjacency(EdgeVariant::FullyConnected).matrix,
        Tensor::matrix(6, 6, vec![1.0; 36]).unwrap()
    );

    // Normalized rows of the directed G1: round-1 rows average over four
    // entries (three predecessors plus self).
    let norm = g1.adjacency(EdgeVariant::Directed).normalized;
    for row in 3..6 {
        for col in 0..3 {
            assert_eq!(norm.at(row, col), 0.25);
        }
        assert_eq!(norm.at(row, row), 0.25);
    }
    // Fully-connected dominates directed entrywise on any multi-node graph.
    let fc = g1.adjacency(EdgeVariant::FullyConnected).matrix;
    let d = g1.adjacency(EdgeVariant::Directed).matrix;
    assert!(fc.data().iter().zip(d.data()).all(|(f, d)| f >= d));
    finish("09 edge-variants", started, Duration::from_secs(1));
}

fn run_cli(args: &[&str], dir: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_magdi-lab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn magdi-lab");
    assert!(
        status.status.success(),
        "magdi-lab {args:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

/// The documented quickstart: generate, train all four levels, compare.
fn quickstart(dir: &Path) {
    run_cli(
        &[
            "gen-corpus", "--task", "modsum", "--n", "1000", "--agents", "3", "--max-rounds",
            "3", "--error-rates", "0.1,0.25,0.4", "--follow", "0.8", "--seed", "7", "--out",
            "corpus.jsonl", "--test-n", "200", "--test-out", "test.jsonl",
        ],
        dir,
    );
    for level in ["r0", "cn", "an", "magdi"] {
        run_cli(
            &[
                "train", "--corpus", "corpus.jsonl", "--level", level, "--out", level,
                "--seed", "7", "--final-only",
            ],
            dir,
        );
    }
    run_cli(
        &[
            "compare",
            "--ckpts",
            "r0/final.magdi,cn/final.magdi,an/final.magdi,magdi/final.magdi",
            "--test",
            "test.jsonl",
            "--seeds",
            "1",
            "--out",
            "comparison.json",
        ],
        dir,
    );
    run_cli(
        &[
            "eval", "--ckpt", "magdi/final.magdi", "--test", "test.jsonl", "--out",
            "report.json",
        ],
        dir,
    );
}

#[test]
fn criterion_10_pipeline_determinism() {
    let _guard = HEAVY.lock().unwrap();
    let started = Instant::now();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    quickstart(dir_a.path());
    quickstart(dir_b.path());
    for file in [
        "corpus.jsonl",
        "test.jsonl",
        "r0/final.magdi",
        "cn/final.magdi",
        "an/final.magdi",
        "magdi/final.magdi",
        "r0/train-log.jsonl",
        "magdi/train-log.jsonl",
        "comparison.json",
        "report.json",
    ] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identically seeded runs");
    }
    finish("10 pipeline-determinism", started, Duration::from_secs(1800));
}
