//! End-to-end acceptance checks, one test per criterion. Training-based
//! checks share trained models through a cache, and every test holds one
//! global lock so timing measurements never overlap other work.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use visolo_core::aggregation::{aggregation_weights, match_memory, reweight_scores, temporal_aggregate, Aggregator, GridSimilarity};
use visolo_core::autograd::{Tape, DICE_EPS};
use visolo_core::data::{Category, TrackAnnotation};
use visolo_core::decoder::InstancePrediction;
use visolo_core::eval::{default_iou_thresholds, identity_consistency};
use visolo_core::inference::{AccessRecorder, VideoFrames};
use visolo_core::memory::GridFeatureSet;
use visolo_core::network::{assemble_mask, CategoryScores, DynamicKernels, MaskFeatureMap};
use visolo_core::nn::Conv2d;
use visolo_core::training::losses::{FOCAL_ALPHA, FOCAL_GAMMA};
use visolo_core::training::{clip_loss, dice_loss, focal_loss, prepare_clip, LossReport, TrainClip};
use visolo_core::{
    evaluate, generate_moving_shapes, ground_truth_result, run_inference, run_video, train, BinaryMask, Config, FeatureMemory,
    ParamStore, RetentionPolicy, SyntheticConfig, Tensor, TrackResult, TrackerConfig, Video, VideoDataset, VideoResult,
    VisoloModel,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

struct Trained {
    model: VisoloModel,
    store: ParamStore,
    history: Vec<LossReport>,
    held_out: VideoDataset,
    config: Config,
    seconds: f64,
}

type Cache = Mutex<BTreeMap<(u64, bool), Arc<Trained>>>;
static TRAINED: Cache = Mutex::new(BTreeMap::new());

/// The default configuration trained with `seed`, with both
/// spatio-temporal modules (`full`) or neither.
fn trained(seed: u64, full: bool) -> Arc<Trained> {
    if let Some(t) = TRAINED.lock().unwrap_or_else(|e| e.into_inner()).get(&(seed, full)) {
        return t.clone();
    }
    let mut config = Config::default().with_seed(seed);
    if !full {
        config.model = config.model.clone().ablated();
    }
    config.train.log_every = 0;
    let (train_set, held_out) = config.data.load_split().unwrap();
    assert_eq!((train_set.videos.len(), held_out.videos.len()), (20, 5));
    let (model, mut store) = VisoloModel::init(&config.model, config.seed).unwrap();
    let start = Instant::now();
    let outcome = train(&model, &mut store, &train_set, &config.train, &config.norm, config.seed, |_, _, _| Ok(())).unwrap();
    let t = Arc::new(Trained {
        model,
        store,
        history: outcome.history,
        held_out,
        config,
        seconds: start.elapsed().as_secs_f64(),
    });
    TRAINED.lock().unwrap_or_else(|e| e.into_inner()).insert((seed, full), t.clone());
    t
}

fn held_out_metrics(t: &Trained) -> (f64, f64) {
    let report = run_inference(&t.model, &t.store, &t.held_out, &t.config.norm, &t.config.inference()).unwrap();
    let eval = evaluate(&report.results, &t.held_out, &default_iou_thresholds()).unwrap();
    let idc = identity_consistency(&report.results, &t.held_out, 0.5).unwrap();
    (eval.ap50, idc)
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

fn logits_of(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> GridSimilarity {
    GridSimilarity {
        sim: rand_tensor(rng, &[n, n], scale),
        as_probability: false,
    }
}

fn probs_of(rng: &mut ChaCha8Rng, n: usize) -> GridSimilarity {
    GridSimilarity {
        sim: Tensor::from_vec(&[n, n], (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()),
        as_probability: true,
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.dim(1)).map(<[f64]>::to_vec).collect()
}

#[test]
fn acceptance_1_oracle_equivalence() {
    let _g = serial();
    const CASES: usize = 200;
    const TOL: f64 = 1e-10;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };

    for _ in 0..CASES {
        let e = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let n = h * w;

        // match_memory
        let mut store = ParamStore::default();
        let agg = Aggregator::new(&mut store, &mut rng, e);
        randomize(&mut store, &mut rng, 1.0);
        let kq = rand_tensor(&mut rng, &[e, h, w], 1.0);
        let km = rand_tensor(&mut rng, &[e, h, w], 1.0);
        let got = match_memory(&agg.matcher, &store, &kq, &km).unwrap();
        let embed = |stack: &[Conv2d], x: &Tensor| {
            stack.iter().fold(x.clone(), |acc, c| conv_same(&acc, store.get(c.weight), store.get(c.bias.unwrap()).data()))
        };
        let want = gram(&embed(&agg.matcher.query, &kq), &embed(&agg.matcher.memory, &km), 1.0 / (e as f64).sqrt());
        note("match_memory", max_abs_diff(got.sim.data(), &want.concat()));

        // temporal_aggregate
        let t = rng.random_range(1..=3);
        let sims: Vec<GridSimilarity> = (0..t).map(|_| logits_of(&mut rng, n, 3.0)).collect();
        let feats = rand_tensor(&mut rng, &[t, e, h, w], 1.0);
        let got = temporal_aggregate(&sims, &feats, &agg.category_value, &store).unwrap();
        let wt = joint_softmax(&sims.iter().map(|s| rows(&s.sim)).collect::<Vec<_>>());
        let pw = store.get(agg.category_value.weight).data();
        let pb = store.get(agg.category_value.bias.unwrap()).data();
        let value = |k: usize, o: usize, g: usize| pb[o] + (0..e).map(|c| pw[o * e + c] * feats.data()[(k * e + c) * n + g]).sum::<f64>();
        let mut want = vec![0.0; e * n];
        for o in 0..e {
            for r in 0..n {
                want[o * n + r] = (0..t).flat_map(|k| (0..n).map(move |g| (k, g))).map(|(k, g)| wt[r][k * n + g] * value(k, o, g)).sum();
            }
        }
        note("temporal_aggregate", max_abs_diff(got.data(), &want));

        // reweight_scores
        let classes = rng.random_range(1..=3);
        let cat = CategoryScores {
            values: rand_tensor(&mut rng, &[classes, h, w], 4.0),
            is_probability: false,
        };
        let s1 = probs_of(&mut rng, n);
        let s2 = rng.random_bool(0.5).then(|| probs_of(&mut rng, n));
        let got = reweight_scores(&cat, &s1, s2.as_ref()).unwrap();
        let row_max = |s: &GridSimilarity, r: usize| (0..n).map(|c| s.sim.data()[r * n + c]).fold(f64::NEG_INFINITY, f64::max);
        let mut want = vec![0.0; classes * n];
        for k in 0..classes {
            for r in 0..n {
                let factor = match &s2 {
                    Some(s2) => (row_max(&s1, r) + row_max(s2, r)) / 2.0,
                    None => row_max(&s1, r),
                };
                want[k * n + r] = sigmoid(cat.values.data()[k * n + r]) * factor;
            }
        }
        note("reweight_scores", max_abs_diff(got.scores.data(), &want));

        // assemble_mask
        let d = rng.random_range(1..=4);
        let (hm, wm) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let kernels = DynamicKernels {
            kernels: rand_tensor(&mut rng, &[d, h, w], 2.0),
        };
        let mf = MaskFeatureMap {
            features: rand_tensor(&mut rng, &[d, hm, wm], 2.0),
        };
        let (i, j) = (rng.random_range(0..h), rng.random_range(0..w));
        let got = assemble_mask(&kernels, &mf, (i, j)).unwrap();
        let want: Vec<f64> = (0..hm * wm)
            .map(|p| sigmoid((0..d).map(|c| kernels.kernels.data()[(c * h + i) * w + j] * mf.features.data()[c * hm * wm + p]).sum()))
            .collect();
        note("assemble_mask", max_abs_diff(got.data(), &want));

        // focal_loss, both the scalar helper and the tape node
        let len = rng.random_range(1..=16);
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(0.01..0.99)).collect();
        let tb: Vec<bool> = (0..len).map(|_| rng.random_bool(0.4)).collect();
        let tf: Vec<f64> = tb.iter().map(|&b| b as u8 as f64).collect();
        let norm = rng.random_range(1..=5);
        let want = focal_oracle(&p, &tb, FOCAL_ALPHA, FOCAL_GAMMA);
        let got = focal_loss(&p, &tf, FOCAL_ALPHA, FOCAL_GAMMA, norm).unwrap();
        note("focal_loss", (got - want / norm as f64).abs());
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::from_vec(&[len], p.clone()));
        let l = tape.focal_loss_sum(pv, &tf, FOCAL_ALPHA, FOCAL_GAMMA);
        note("focal_loss", (tape.value(l).item() - want).abs());

        // dice_loss, scalar helper and one tape row
        let q: Vec<f64> = (0..len).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
        let want = dice_oracle(&p, &q, DICE_EPS);
        note("dice_loss", (dice_loss(&p, &q).unwrap() - want).abs());
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::from_vec(&[1, len], p.clone()));
        let l = tape.dice_rows(pv, &q);
        note("dice_loss", (tape.value(l).data()[0] - want).abs());

        // video AP evaluator
        let (lib, oracle) = random_eval_case(&mut rng);
        note("evaluator", max_abs_diff(&lib, &oracle));
    }

    let secs = start.elapsed().as_secs_f64();
    for (name, err) in &worst {
        println!("{name:<20} max abs error {err:.3e} over {CASES} cases");
    }
    println!("runtime {secs:.1}s");
    for (name, err) in &worst {
        let tol = if *name == "evaluator" { 1e-9 } else { TOL };
        assert!(*err <= tol, "{name}: error {err:e} exceeds {tol:e}");
    }
    assert_eq!(worst.len(), 7);
    assert!(secs < 120.0, "took {secs:.1}s");
}

/// A random evaluation problem; returns `[AP, AP50, AP75, AR1, AR10]` from
/// the library and from the brute-force oracle.
fn random_eval_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (4, 4);
    let classes = 2;
    let n_videos = rng.random_range(1..=3);
    let mut ds = VideoDataset {
        categories: (0..classes)
            .map(|c| Category {
                id: c as u64 + 1,
                name: format!("c{c}"),
            })
            .collect(),
        videos: Vec::new(),
    };
    let mut results = Vec::new();
    let mut oracle_in = Vec::new();
    for v in 0..n_videos {
        let frames = rng.random_range(1..=3);
        let n_gt = rng.random_range(0..=3);
        let mut gts = Vec::new();
        for g in 0..n_gt {
            let masks: Vec<BinaryMask> = (0..frames).map(|_| rand_mask(rng, h, w, 0.4)).collect();
            gts.push((g as u64, rng.random_range(0..classes), masks));
        }
        let n_det = rng.random_range(0..=3);
        let mut dets = Vec::new();
        for d in 0..n_det {
            // half the detections are noisy copies of a ground truth track
            let masks: Vec<BinaryMask> = if !gts.is_empty() && rng.random_bool(0.6) {
                let src = &gts[rng.random_range(0..gts.len())].2;
                src.iter()
                    .map(|m| BinaryMask::new(h, w, m.data().iter().map(|&b| if rng.random_bool(0.15) { !b } else { b }).collect()).unwrap())
                    .collect()
            } else {
                (0..frames).map(|_| rand_mask(rng, h, w, 0.4)).collect()
            };
            dets.push(TrackResult {
                identity: d as u64,
                class_id: rng.random_range(0..classes),
                confidence: rng.random_range(0.0..1.0),
                masks,
            });
        }
        let video = Video {
            id: v as u64,
            height: h,
            width: w,
            frames: visolo_core::data::FrameSourceKind::InMemory(vec![image::RgbImage::new(w as u32, h as u32); frames]),
            tracks: gts
                .iter()
                .map(|(id, c, m)| TrackAnnotation {
                    id: *id,
                    class_id: *c,
                    masks: m.iter().map(|m| (!m.is_empty()).then(|| m.clone())).collect(),
                })
                .collect(),
        };
        oracle_in.push((
            gts.iter()
                .map(|(_, c, m)| OTrack {
                    class_id: *c,
                    score: 1.0,
                    masks: m.clone(),
                })
                .collect(),
            dets.iter()
                .map(|d| OTrack {
                    class_id: d.class_id,
                    score: d.confidence,
                    masks: d.masks.clone(),
                })
                .collect(),
        ));
        ds.videos.push(video);
        results.push(VideoResult {
            video_id: v as u64,
            num_frames: frames,
            height: h,
            width: w,
            tracks: dets,
        });
    }
    let r = evaluate(&results, &ds, &default_iou_thresholds()).unwrap();
    let o = eval_oracle(&oracle_in, classes);
    (vec![r.ap, r.ap50, r.ap75, r.ar1, r.ar10], vec![o.ap, o.ap50, o.ap75, o.ar1, o.ar10])
}

#[test]
fn acceptance_2_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let config = Config::default();
    assert!(config.model.temporal_aggregation && config.model.score_reweighting);
    let (model, store) = VisoloModel::init(&config.model, 7).unwrap();
    let ds = generate_moving_shapes(&SyntheticConfig {
        seed: 4,
        n_shapes: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let clip = TrainClip::from_video(&ds.videos[0], 2).unwrap();
    let prepared = prepare_clip(&model, &clip, &config.norm, config.train.loss.center_scale, "check".into()).unwrap();

    let mut tape = Tape::training(&store);
    let (loss, report) = clip_loss(&model, &mut tape, &prepared, &config.train.loss);
    assert!(report.class > 0.0 && report.mask > 0.0 && report.grid > 0.0, "{report:?}");
    let grads = tape.backward(loss);

    // Candidates: every element whose gradient is clearly above the
    // finite-difference noise floor.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut spatio = Vec::new();
    let mut other = Vec::new();
    for id in store.ids() {
        let Some(g) = grads.param(id) else { continue };
        let name = store.name(id);
        let temporal = name.starts_with("matcher.") || name.starts_with("aggregate.");
        for (e, &v) in g.data().iter().enumerate() {
            if v.abs() >= 1e-5 {
                if temporal {
                    spatio.push((id, e, v));
                } else {
                    other.push((id, e, v));
                }
            }
        }
    }
    let mut pick = |pool: &mut Vec<_>, k: usize| {
        (0..k.min(pool.len()))
            .map(|_| pool.swap_remove(rng.random_range(0..pool.len())))
            .collect::<Vec<_>>()
    };
    let mut sample = pick(&mut spatio, 20);
    sample.extend(pick(&mut other, 40));
    assert!(sample.len() >= 50, "only {} usable parameters", sample.len());

    let mut store = store;
    let mut worst: f64 = 0.0;
    for &(id, e, analytic) in &sample {
        let x = store.get(id).data()[e];
        let mut eval_at = |v: f64| {
            store.get_mut(id).data_mut()[e] = v;
            let mut t = Tape::inference(&store);
            let (l, _) = clip_loss(&model, &mut t, &prepared, &config.train.loss);
            t.value(l).item()
        };
        let h = visolo_core::gradcheck::FD_STEP;
        let numeric = (eval_at(x + h) - eval_at(x - h)) / (2.0 * h);
        store.get_mut(id).data_mut()[e] = x;
        let rel = visolo_core::gradcheck::relative_error(analytic, numeric);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} parameters ({} through matching and aggregation), worst relative error {worst:.2e}, {secs:.1}s",
        sample.len(),
        sample.len().min(20)
    );
    assert!(worst < 1e-4, "relative error {worst:e}");
    assert!(secs < 300.0);
}

#[test]
fn acceptance_3_weight_contracts() {
    let _g = serial();
    let mut runner = TestRunner::new(RunnerConfig {
        cases: 1000,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    let strategy = (1usize..=3, 1usize..=4, 1usize..=4, 1usize..=4, 0.1f64..60.0, any::<u64>());
    let result = runner.run(&strategy, |(t, h, w, e, scale, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        let sims: Vec<GridSimilarity> = (0..t).map(|_| logits_of(&mut rng, n, scale)).collect();
        let wt = aggregation_weights(&sims).unwrap().weights;
        for row in wt.data().chunks(t * n) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sums to {}", s);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }

        let cat = CategoryScores {
            values: rand_tensor(&mut rng, &[3, h, w], scale),
            is_probability: false,
        };
        let s1 = probs_of(&mut rng, n);
        let s2 = probs_of(&mut rng, n);
        let p = reweight_scores(&cat, &s1, Some(&s2)).unwrap();
        let c = cat.probabilities();
        for (pv, cv) in p.scores.data().iter().zip(c.values.data()) {
            prop_assert!(pv <= cv, "{} > {}", pv, cv);
        }

        let mut store = ParamStore::default();
        let agg = Aggregator::new(&mut store, &mut rng, e);
        randomize(&mut store, &mut rng, 1.0);
        let kq = rand_tensor(&mut rng, &[e, h, w], scale);
        let km = rand_tensor(&mut rng, &[e, h, w], scale);
        let sim = match_memory(&agg.matcher, &store, &kq, &km).unwrap().probabilities();
        prop_assert!(sim.sim.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        Ok(())
    });
    if let Err(e) = result {
        panic!("{e}");
    }
    println!("1000 random cases: W_T rows sum to 1, P <= Cat, similarities in [0, 1]");
}

/// One scenario: `cells[t]` lists `(gt id, grid cell)` of visible instances.
fn tracking_scenario(rng: &mut ChaCha8Rng, grid: [usize; 2], force_long_gap: bool) -> Vec<Vec<(usize, (usize, usize))>> {
    let len = rng.random_range(20..=60);
    let n_inst = rng.random_range(1..=5);
    let mut present = vec![vec![false; len]; n_inst];
    for (k, p) in present.iter_mut().enumerate() {
        let s = rng.random_range(0..len / 2);
        let e = rng.random_range(s + 1..=len);
        p[s..e].iter_mut().for_each(|v| *v = true);
        let gaps = if force_long_gap && k == 0 { 1 } else { rng.random_range(0..=2) };
        for _ in 0..gaps {
            let g = if force_long_gap && k == 0 { 10 } else { rng.random_range(1..=10) };
            // keep one visible frame on each side so the instance reappears
            if e - s < g + 2 {
                continue;
            }
            let at = rng.random_range(s + 1..e - g);
            // gaps never merge
            if p[at - 1..=at + g].iter().all(|&v| v) {
                p[at..at + g].iter_mut().for_each(|v| *v = false);
            }
        }
    }
    let n = grid[0] * grid[1];
    (0..len)
        .map(|t| {
            let mut cells: Vec<usize> = (0..n).collect();
            let mut out = Vec::new();
            for (k, p) in present.iter().enumerate() {
                if p[t] {
                    let c = cells.swap_remove(rng.random_range(0..cells.len()));
                    out.push((k, (c / grid[1], c % grid[1])));
                }
            }
            out
        })
        .collect()
}

#[test]
fn acceptance_4_tracking_oracle() {
    let _g = serial();
    let grid = [4, 7];
    let n = grid[0] * grid[1];
    let cfg = TrackerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut longest_gap = 0;
    for scenario in 0..100 {
        let frames = tracking_scenario(&mut rng, grid, scenario % 10 == 0);
        for k in 0..5 {
            let seen: Vec<usize> = frames.iter().enumerate().filter(|(_, f)| f.iter().any(|x| x.0 == k)).map(|(t, _)| t).collect();
            for w in seen.windows(2) {
                longest_gap = longest_gap.max(w[1] - w[0] - 1);
            }
        }
        let mut state = visolo_core::tracker::TrackState::new();
        let mut memory = FeatureMemory::new(RetentionPolicy::default()).unwrap();
        let mut mapping: HashMap<usize, u64> = HashMap::new();
        for (t, visible) in frames.iter().enumerate() {
            let sims: BTreeMap<usize, GridSimilarity> = memory
                .frame_indices()
                .into_iter()
                .map(|m| {
                    let mut s = Tensor::zeros(&[n, n]);
                    for &(k, (i, j)) in visible {
                        for &(k2, (i2, j2)) in &frames[m] {
                            if k == k2 {
                                s.data_mut()[(i * grid[1] + j) * n + i2 * grid[1] + j2] = 1.0;
                            }
                        }
                    }
                    (m, GridSimilarity { sim: s, as_probability: true })
                })
                .collect();
            let preds: Vec<InstancePrediction> = visible
                .iter()
                .map(|&(_, g)| InstancePrediction {
                    grid_index: g,
                    class_id: 0,
                    score: rng.random_range(0.3..1.0),
                    soft_mask: Tensor::zeros(&[1, 1]),
                    mask: BinaryMask::empty(1, 1),
                })
                .collect();
            let m = state.track_frame(t, &preds, &sims, grid[1], &cfg).unwrap();
            for &(k, g) in visible {
                let id = m.identity_of(g).unwrap();
                let prev = *mapping.entry(k).or_insert(id);
                assert_eq!(prev, id, "scenario {scenario}: instance {k} changed identity at frame {t}");
            }
            let ids: BTreeSet<u64> = mapping.values().copied().collect();
            assert_eq!(ids.len(), mapping.len(), "scenario {scenario}: two instances share an identity");
            memory.set_pinned(state.pinned_frames());
            let f = Tensor::zeros(&[1, 1, 1]);
            memory.insert(GridFeatureSet::new(f.clone(), f.clone(), f, t).unwrap()).unwrap();
        }
    }
    println!("100 scenarios reproduced exactly; longest occlusion gap {longest_gap} frames");
    assert_eq!(longest_gap, 10);
}

#[test]
fn acceptance_5_memory_policy() {
    let _g = serial();
    let policies = [
        ("every5", RetentionPolicy::FirstPlusEveryNPlusLast2(5)),
        ("last2", RetentionPolicy::LastK(2)),
        ("last10", RetentionPolicy::LastK(10)),
        ("last20", RetentionPolicy::LastK(20)),
    ];
    for (name, policy) in policies {
        assert_eq!(name.parse::<RetentionPolicy>().unwrap(), policy);
        let mut mem = FeatureMemory::new(policy).unwrap();
        for t in 0..500usize {
            let f = Tensor::zeros(&[1, 1, 1]);
            mem.insert(GridFeatureSet::new(f.clone(), f.clone(), f, t).unwrap()).unwrap();
            let want: Vec<usize> = match policy {
                RetentionPolicy::LastK(k) => (t.saturating_sub(k - 1)..=t).collect(),
                _ => (0..=t).filter(|&f| f == 0 || f % 5 == 0 || f + 2 > t).collect(),
            };
            assert_eq!(mem.frame_indices(), want, "{name} at frame {t}");
            if name == "every5" {
                let closed = t / 5 + 1 + (t % 5 != 0) as usize + (t >= 1 && (t - 1) % 5 != 0) as usize;
                assert_eq!(mem.len(), closed, "every5 count at frame {t}");
                assert_eq!(policy.retained_count(t), closed);
            }
        }
    }
    println!("retained sets match enumeration for 500 frames under every5, last2, last10, last20");
}

#[test]
fn acceptance_6_toy_learning() {
    let _g = serial();
    let t = trained(0, true);
    let (ap50, idc) = held_out_metrics(&t);
    let h = &t.history;
    let first: f64 = h[..100].iter().map(|r| r.total).sum::<f64>() / 100.0;
    let last: f64 = h[h.len() - 100..].iter().map(|r| r.total).sum::<f64>() / 100.0;
    println!(
        "{} steps in {:.0}s: loss {first:.3} -> {last:.3}; held-out AP50 {ap50:.3}, identity consistency {idc:.3}",
        h.len(),
        t.seconds
    );
    assert!(h.len() <= 2000);
    assert!(ap50 >= 0.5, "AP50 {ap50}");
    assert!(idc >= 0.8, "identity consistency {idc}");
    assert!(last <= 0.5 * first, "loss fell from {first} to {last}");
}

#[test]
fn acceptance_7_ablation_trend() {
    let _g = serial();
    let mut full = Vec::new();
    let mut ablated = Vec::new();
    for seed in 0..3 {
        let (f, _) = held_out_metrics(&trained(seed, true));
        let (a, _) = held_out_metrics(&trained(seed, false));
        println!("seed {seed}: AP50 full {f:.3}, without aggregation and reweighting {a:.3}");
        full.push(f);
        ablated.push(a);
    }
    let mf = full.iter().sum::<f64>() / 3.0;
    let ma = ablated.iter().sum::<f64>() / 3.0;
    println!("mean AP50 full {mf:.3}, ablated {ma:.3}");
    assert!(ma <= mf + 0.02, "ablated {ma:.3} exceeds full {mf:.3} + 0.02");
}

#[test]
fn acceptance_8_bounded_online_cost() {
    let _g = serial();
    let t = trained(0, true);
    let ds = generate_moving_shapes(&SyntheticConfig {
        seed: 200,
        n_frames: 200,
        n_shapes: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let video = &ds.videos[0];
    let runs = 5;
    let mut per_frame = vec![0.0; video.num_frames()];
    let mut memory_len = Vec::new();
    for _ in 0..runs {
        let mut src = AccessRecorder::new(VideoFrames(video));
        let run = run_video(&t.model, &t.store, &mut src, &t.config.norm, &t.config.inference()).unwrap();
        assert!(src.is_sequential() && src.accesses().len() == video.num_frames(), "frames read out of order");
        for tm in &run.timings {
            per_frame[tm.frame_index] += tm.seconds / runs as f64;
        }
        memory_len = run.timings.iter().map(|tm| tm.memory_len).collect();
    }
    // frame 0 has no memory and skips matching entirely
    let x: Vec<f64> = (1..per_frame.len()).map(|v| v as f64).collect();
    let y = &per_frame[1..];
    let (slope, tstat) = ols_slope_t(&x, y);
    let crit = StudentsT::new(0.0, 1.0, (x.len() - 2) as f64).unwrap().inverse_cdf(0.975);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    println!(
        "mean {:.2} ms/frame, slope {:.3} us/frame ({:+.2}% over the video), t = {tstat:.2} (critical {crit:.2}); memory {} -> {} frames",
        mean * 1e3,
        slope * 1e6,
        slope * y.len() as f64 / mean * 100.0,
        memory_len[1],
        memory_len.last().unwrap()
    );
    assert!(tstat.abs() < crit, "per-frame time trends upward: t = {tstat:.2}");
}

#[test]
fn acceptance_9_evaluator_self_consistency() {
    let _g = serial();
    let ds = generate_moving_shapes(&SyntheticConfig {
        seed: 9,
        n_videos: 6,
        n_shapes: 3,
        min_shapes: Some(1),
        occlusion_prob: 0.3,
        exit_prob: 0.3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let results: Vec<VideoResult> = ds.videos.iter().map(ground_truth_result).collect();
    let r = evaluate(&results, &ds, &default_iou_thresholds()).unwrap();
    println!(
        "ground truth vs itself: AP {} AP50 {} AP75 {} AR1-clipped {} AR10-clipped {}",
        r.ap, r.ap50, r.ap75, r.ar1_clipped, r.ar10_clipped
    );
    for (name, v) in [("AP", r.ap), ("AP50", r.ap50), ("AP75", r.ap75), ("AR1 clipped", r.ar1_clipped), ("AR10 clipped", r.ar10_clipped)] {
        assert_eq!(v, 1.0, "{name}");
    }

    // one track, three frames, every frame at IoU exactly 0.6
    let (h, w) = (2, 5);
    let gt_mask = BinaryMask::from_fn(h, w, |_, _| true);
    let pred_mask = BinaryMask::from_fn(h, w, |_, x| x < 3);
    let one = VideoDataset {
        categories: vec![Category { id: 1, name: "a".into() }],
        videos: vec![Video {
            id: 0,
            height: h,
            width: w,
            frames: visolo_core::data::FrameSourceKind::InMemory(vec![image::RgbImage::new(w as u32, h as u32); 3]),
            tracks: vec![TrackAnnotation {
                id: 0,
                class_id: 0,
                masks: vec![Some(gt_mask); 3],
            }],
        }],
    };
    let pred = VideoResult {
        video_id: 0,
        num_frames: 3,
        height: h,
        width: w,
        tracks: vec![TrackResult {
            identity: 0,
            class_id: 0,
            confidence: 0.9,
            masks: vec![pred_mask; 3],
        }],
    };
    let r = evaluate(&[pred], &one, &default_iou_thresholds()).unwrap();
    println!("IoU 0.6 example: AP {}", r.ap);
    assert_eq!(r.ap, 0.3);
}
