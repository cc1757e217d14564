use fdsem::eval::{score_ranking, ModelStack};
use fdsem::graph::{topology_of, DependencyGraph, Edge, RankingRow, Role, Vocabulary};
use fdsem::lexicon::{clamp_truth, truth_prob, LexicalModel};
use fdsem::train::{train_epoch, Model, ModelDims, Optimisers, TrainConfig};
use fdsem::world::{exact_prior, Pixie, SituationTable, WorldModel, DEFAULT_ENUM_BUDGET};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIM: usize = 8;
const CARD: usize = 3;
const VOCAB: usize = 20;

struct Planted {
    world: WorldModel,
    lex: LexicalModel,
    table: SituationTable,
    cum: Vec<f64>,
}

fn planted(seed: u64, couple: f64, sharp: f64, off: f64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eye = Array2::zeros((DIM, DIM));
    for i in 0..DIM {
        eye[(i, i)] = couple;
    }
    let world = WorldModel::new(DIM, CARD, vec![eye.clone(), eye]).unwrap();
    let mut weights = Array2::from_elem((VOCAB, DIM), -off);
    for r in 0..VOCAB {
        let mut units: Vec<usize> = (0..DIM).collect();
        for k in 0..CARD {
            let pick = k + (rng.random::<u32>() as usize) % (DIM - k);
            units.swap(k, pick);
        }
        for &u in &units[..CARD] {
            weights[(r, u)] = sharp;
        }
    }
    let lex = LexicalModel::new(weights, Array1::zeros(VOCAB)).unwrap();
    let topo = topology_of(&svo_graph([Some(0), Some(0), Some(0)]));
    let table = exact_prior(&topo, &world, DEFAULT_ENUM_BUDGET).unwrap();
    let mut cum = Vec::with_capacity(table.probs.len());
    let mut acc = 0.0;
    for &p in &table.probs {
        acc += p;
        cum.push(acc);
    }
    Planted { world, lex, table, cum }
}

fn svo_graph(nodes: [Option<usize>; 3]) -> DependencyGraph {
    DependencyGraph::new(
        nodes.to_vec(),
        vec![
            Edge { source: 1, label: 0, target: 0 },
            Edge { source: 1, label: 1, target: 2 },
        ],
    )
    .unwrap()
}

fn sample_situation(p: &Planted, rng: &mut ChaCha8Rng) -> Vec<Pixie> {
    let u = rng.random::<f64>();
    let idx = p.cum.partition_point(|&c| c <= u).min(p.cum.len() - 1);
    p.table
        .assignment(idx)
        .iter()
        .map(|&s| Pixie::new(p.table.subsets[s].clone()))
        .collect()
}

fn sample_predicate(p: &Planted, x: &Pixie, rng: &mut ChaCha8Rng) -> usize {
    let truths: Vec<f64> =
        (0..VOCAB).map(|r| clamp_truth(truth_prob(x, r, &p.lex).unwrap())).collect();
    let total: f64 = truths.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (r, t) in truths.iter().enumerate() {
        u -= t;
        if u <= 0.0 {
            return r;
        }
    }
    VOCAB - 1
}

fn sample_graph(p: &Planted, rng: &mut ChaCha8Rng) -> (DependencyGraph, Vec<Pixie>) {
    let pixies = sample_situation(p, rng);
    let nodes: Vec<Option<usize>> =
        pixies.iter().map(|x| Some(sample_predicate(p, x, rng))).collect();
    (svo_graph([nodes[0], nodes[1], nodes[2]]), pixies)
}

fn vocabulary(corpus: &[DependencyGraph]) -> Vocabulary {
    let mut counts = vec![0u64; VOCAB];
    for g in corpus {
        for pred in g.nodes().iter().flatten() {
            counts[*pred] += 1;
        }
    }
    let predicates: Vec<(String, u64)> =
        counts.iter().enumerate().map(|(r, &c)| (format!("_p{r:02}"), c.max(1))).collect();
    Vocabulary::from_parts(predicates, vec!["ARG1".into(), "ARG2".into()]).unwrap()
}

fn probe_success(p: &Planted, stack: &ModelStack, probes: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut wins = 0;
    for _ in 0..probes {
        let (graph, _) = sample_graph(p, rng);
        let target = (rng.random::<u32>() as usize) % 3;
        let truth = graph.predicate(target).unwrap();
        let mut masked: Vec<Option<usize>> = graph.nodes().to_vec();
        masked[target] = None;
        let masked = svo_graph([masked[0], masked[1], masked[2]]);
        let mut distractor = (rng.random::<u32>() as usize) % VOCAB;
        while distractor == truth {
            distractor = (rng.random::<u32>() as usize) % VOCAB;
        }
        let p_true = fdsem::eval::infer_truth(&masked, target, truth, stack).unwrap();
        let p_rand = fdsem::eval::infer_truth(&masked, target, distractor, stack).unwrap();
        if p_true > p_rand {
            wins += 1;
        }
    }
    wins as f64 / probes as f64
}

fn benchmark_rows(p: &Planted, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Vec<RankingRow> {
    let mut per_term: Vec<Vec<RankingRow>> = vec![Vec::new(); 10];
    let mut attempts = 0;
    while per_term.iter().any(|v| v.len() < 3) && attempts < 1_000_000 {
        attempts += 1;
        let (graph, pixies) = sample_graph(p, rng);
        let (slot, role) =
            if rng.random::<f64>() < 0.5 { (0usize, Role::Subject) } else { (2usize, Role::Object) };
        let term = sample_predicate(p, &pixies[slot], rng);
        if term >= 10 || per_term[term].len() >= 3 {
            continue;
        }
        let head = graph.predicate(slot).unwrap();
        if head == term {
            continue;
        }
        per_term[term].push(RankingRow {
            term: vocab.predicate_name(term).to_string(),
            role,
            headnoun: vocab.predicate_name(head).to_string(),
            verb: vocab.predicate_name(graph.predicate(1).unwrap()).to_string(),
            argnoun: vocab.predicate_name(graph.predicate(2 - slot).unwrap()).to_string(),
        });
    }
    per_term.into_iter().flatten().collect()
}

fn permutation_baseline(rows: &[RankingRow], sims: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut props: Vec<(Role, &str, &str, &str)> = Vec::new();
    for row in rows {
        let key = (row.role, row.headnoun.as_str(), row.verb.as_str(), row.argnoun.as_str());
        if !props.contains(&key) {
            props.push(key);
        }
    }
    let terms: Vec<&str> = {
        let mut t = Vec::new();
        for row in rows {
            if !t.contains(&row.term.as_str()) {
                t.push(row.term.as_str());
            }
        }
        t
    };
    let n = props.len();
    let mut total = 0.0;
    for _ in 0..sims {
        let mut map = 0.0;
        for term in &terms {
            let k = rows.iter().filter(|r| r.term == *term).count();
            let mut flags = vec![false; n];
            let mut placed = 0;
            while placed < k {
                let pos = (rng.random::<u32>() as usize) % n;
                if !flags[pos] {
                    flags[pos] = true;
                    placed += 1;
                }
            }
            let mut hits = 0;
            let mut ap = 0.0;
            for (i, &f) in flags.iter().enumerate() {
                if f {
                    hits += 1;
                    ap += hits as f64 / (i + 1) as f64;
                }
            }
            map += ap / k as f64;
        }
        total += map / terms.len() as f64;
    }
    total / sims as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let beta: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5.0);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(20);
    let couple: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2.5);
    let sharp: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let off: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(6.0);

    let started = std::time::Instant::now();
    let p = planted(1234, couple, sharp, off);
    let mut data_rng = ChaCha8Rng::seed_from_u64(555);
    let corpus: Vec<DependencyGraph> =
        (0..500).map(|_| sample_graph(&p, &mut data_rng).0).collect();
    let vocab = vocabulary(&corpus);
    println!("data built in {:?}", started.elapsed());

    let mut dims = ModelDims::new(DIM, CARD);
    dims.init_density = 1.0;
    dims.init_scale = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut model = Model::init(&vocab, &dims, &mut rng).unwrap();
    let mut opt = Optimisers::new(&model);
    let cfg = TrainConfig {
        lr_world: lr,
        lr_lexical: lr * 2.0,
        lr_encoder: lr,
        l2_world: 1e-5,
        l2_lexical: 1e-5,
        l2_encoder: 1e-5,
        beta,
        alpha: 1.0,
        n_neg: 10,
        dropout_rate: 0.3,
        bp_iterations: 3,
        bp_damping: 0.5,
        batch_size: 32,
        epochs,
        seed: 99,
        ..TrainConfig::default()
    };

    let probe_rng = ChaCha8Rng::seed_from_u64(31337);
    for epoch in 0..cfg.epochs {
        let m = train_epoch(&corpus, &vocab, &mut model, &mut opt, &cfg, epoch).unwrap();
        if (epoch + 1) % 5 == 0 || epoch == 0 {
            let stack = ModelStack {
                vocab: &vocab,
                world: &model.world,
                lexical: &model.lexical,
                encoder: &model.encoder,
            };
            let mut pr = probe_rng.clone();
            let succ = probe_success(&p, &stack, 200, &mut pr);
            println!(
                "epoch {epoch}: objective {:.3} gen {:.3} probe {succ:.3} ({:?})",
                m.objective,
                m.generation,
                started.elapsed()
            );
        }
    }
    let stack = ModelStack {
        vocab: &vocab,
        world: &model.world,
        lexical: &model.lexical,
        encoder: &model.encoder,
    };
    let mut pr = probe_rng.clone();
    let succ = probe_success(&p, &stack, 200, &mut pr);

    let mut bench_rng = ChaCha8Rng::seed_from_u64(4242);
    let rows = benchmark_rows(&p, &vocab, &mut bench_rng);
    let report = score_ranking(&rows, &stack, None).unwrap();
    let baseline = permutation_baseline(&rows, 300, &mut bench_rng);
    println!(
        "probe {succ:.3}; map {:.3} baseline {:.3} ratio {:.2}; elapsed {:?}",
        report.map,
        baseline,
        report.map / baseline,
        started.elapsed()
    );
}
