//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hapfi::checkpoint::{self, Checkpoint};
use hapfi::formats;
use hapfi_core::autodiff::Tape;
use hapfi_core::dataset::{
    corpus_token_vocab, derive_seed, generate_corpus, Corpus, CorpusConfig, Episode, ModalityMask, Placement, Scene,
    Split, Step,
};
use hapfi_core::encoders::{ClassMask, Observation, RgbImage};
use hapfi_core::fusion::{x_mha, CrossAttention, FusionStack};
use hapfi_core::heads::{subgoal_loss, Action, SubGoal};
use hapfi_core::history::{integrate_visual, VisualHistory};
use hapfi_core::model::{PlannerConfig, PlannerModel, PreparedEpisode};
use hapfi_core::nn::TransformerBlock;
use hapfi_core::params::{ParamBuilder, ParamStore};
use hapfi_core::simulator::{
    recovery_trials, run_agent, FailureInjector, FailureKind, ModelPolicy, RecoveryOracle, ScheduledFailure,
    ScriptedPolicy, TerminalStatus, Trajectory,
};
use hapfi_core::trainer::{
    ablation_grid, evaluate, prepare_episodes, Control, MaskedPlanner, Predictor, SplitReport, TrainConfig, Trainer,
};
use hapfi_core::world::{class_index, receptacle_object, world_vocabularies, Outcome, Task, TaskKind, WorldState};
use hapfi_core::{Result as CoreResult, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// State shared between criteria.
#[derive(Default)]
struct Ctx {
    /// Every report produced anywhere in the suite.
    reports: Vec<(String, SplitReport)>,
    /// Model trained by the overfit criterion, reused later.
    overfit: Option<(PlannerModel, Corpus)>,
}

impl Ctx {
    fn record(&mut self, label: &str, r: SplitReport) -> SplitReport {
        self.reports.push((label.to_string(), r));
        r
    }
}

// ---------------------------------------------------------------------------
// Straight-line oracles over nested vectors.

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn vec1(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_row(a: &Mat, bias: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(bias).map(|(p, q)| p + q).collect()).collect()
}

fn softmax(xs: &[f64], valid: &[bool]) -> Vec<f64> {
    let m = xs
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().zip(valid).map(|(x, v)| if *v { (x - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Per-head attention of `q` over `k`/`v` with key validity.
fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, key_valid: &[bool]) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores, key_valid);
            for c in 0..dh {
                out[i][h * dh + c] = (0..k.len()).map(|j| p[j] * v[j][h * dh + c]).sum();
            }
        }
    }
    out
}

fn oracle_x_mha(store: &ParamStore, p: &CrossAttention, v: &Mat, l: &Mat, valid: &[bool]) -> (Mat, Mat) {
    let g = |id| mat(store.get(id));
    let (d, h) = (p.width, p.heads);
    let dh = d / h;
    let q = matmul(v, &g(p.query));
    let k = matmul(l, &g(p.key));
    let val_v = matmul(v, &g(p.value_vision));
    let val_l = matmul(l, &g(p.value_language));
    let mut star_l = vec![vec![0.0; d]; v.len()];
    let mut star_v = vec![vec![0.0; d]; l.len()];
    for head in 0..h {
        let a: Mat = (0..v.len())
            .map(|i| {
                (0..l.len())
                    .map(|j| (0..dh).map(|c| q[i][head * dh + c] * k[j][head * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect()
            })
            .collect();
        // Vision reads language through row-softmax of A.
        for i in 0..v.len() {
            let w = softmax(&a[i], valid);
            for c in 0..dh {
                star_l[i][head * dh + c] = (0..l.len()).map(|j| w[j] * val_l[j][head * dh + c]).sum();
            }
        }
        // Language reads vision through row-softmax of Aᵀ.
        for j in 0..l.len() {
            let col: Vec<f64> = (0..v.len()).map(|i| a[i][j]).collect();
            let w = softmax(&col, &vec![true; v.len()]);
            for c in 0..dh {
                star_v[j][head * dh + c] = (0..v.len()).map(|i| w[i] * val_v[i][head * dh + c]).sum();
            }
        }
    }
    let v_f = add(&matmul(&star_l, &g(p.proj_language)), v);
    let l_f = add(&matmul(&star_v, &g(p.proj_vision)), l);
    (v_f, l_f)
}

fn oracle_block(store: &ParamStore, b: &TransformerBlock, x: &Mat, valid: &[bool]) -> Mat {
    let g = |id| mat(store.get(id));
    let gv = |id| vec1(store.get(id));
    let lin = |x: &Mat, l: &hapfi_core::nn::Linear| add_row(&matmul(x, &g(l.weight)), &gv(l.bias.unwrap()));
    let n = layer_norm(x, &gv(b.norm_attn.gain), &gv(b.norm_attn.bias));
    let a = &b.attention;
    let ctx = attention(&lin(&n, &a.query), &lin(&n, &a.key), &lin(&n, &a.value), a.heads, valid);
    let h = add(x, &lin(&ctx, &a.output));
    let n2 = layer_norm(&h, &gv(b.norm_ff.gain), &gv(b.norm_ff.bias));
    let up: Mat = lin(&n2, &b.feed_forward.up)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&h, &lin(&up, &b.feed_forward.down))
}

fn mean_rows(x: &Mat, valid: &[bool]) -> Vec<f64> {
    let rows: Vec<&Vec<f64>> = x.iter().zip(valid).filter(|(_, v)| **v).map(|(r, _)| r).collect();
    (0..x[0].len())
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Composes the two exchanges, the refinement blocks and the pooling.
fn oracle_fuse(store: &ParamStore, f: &FusionStack, v: &Mat, l: &Mat, valid: &[bool]) -> (Vec<f64>, Mat, Mat) {
    let (v1, l1) = oracle_x_mha(store, &f.exchanges[0], v, l, valid);
    let (mut vs, mut ls) = (v1.clone(), l1.clone());
    for i in 1..f.exchanges.len() {
        let vr = oracle_block(store, &f.vision_blocks[i - 1], &vs, &vec![true; vs.len()]);
        let lr = oracle_block(store, &f.language_blocks[i - 1], &ls, valid);
        let (vn, ln) = oracle_x_mha(store, &f.exchanges[i], &vr, &lr, valid);
        vs = vn;
        ls = ln;
    }
    let mut fused = mean_rows(&vs, &vec![true; vs.len()]);
    fused.extend(mean_rows(&ls, valid));
    (fused, v1, l1)
}

fn max_diff(a: &Mat, t: &Tensor) -> f64 {
    a.iter().flatten().zip(t.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_fusion(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> (ParamStore, FusionStack) {
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
    let f = {
        let mut b = ParamBuilder::new(&mut store, &mut init);
        FusionStack::new(&mut b, width, heads, 2 * width, 2).unwrap()
    };
    // Nonzero biases and gains everywhere, not just the initial values.
    for t in store.values_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.6..0.6));
    }
    (store, f)
}

fn random_language(rng: &mut ChaCha8Rng, width: usize) -> (Tensor, Vec<bool>) {
    let t = rng.gen_range(1..=6);
    let valid_len = rng.gen_range(1..=t);
    (random_mat(rng, t, width), (0..t).map(|j| j < valid_len).collect())
}

// ---------------------------------------------------------------------------
// Fixtures.

fn random_observation(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> Observation {
    Observation {
        rgb: RgbImage {
            height: size,
            width: size,
            data: (0..size * size * 3).map(|_| rng.gen()).collect(),
        },
        bbox_mask: ClassMask {
            height: size,
            width: size,
            data: (0..size * size).map(|_| rng.gen_range(0..=classes as u8)).collect(),
        },
    }
}

fn random_goal(rng: &mut ChaCha8Rng, model: &PlannerModel) -> SubGoal {
    let v = &model.vocabs;
    SubGoal::new(
        Action::from_index(rng.gen_range(0..v.num_actions())).unwrap(),
        rng.gen_range(0..v.num_objects()),
        rng.gen_range(0..v.num_receptacles()),
    )
}

fn tiny_planner() -> PlannerConfig {
    PlannerConfig {
        image_size: 16,
        patch: 8,
        width: 16,
        heads: 2,
        visual_depth: 1,
        text_depth: 1,
        max_len: 8,
        ff_hidden: 24,
        head_hidden: 16,
        fusion_stages: 2,
        history_window: 2,
    }
}

fn synthetic_episode(model: &PlannerModel, rng: &mut ChaCha8Rng, steps: usize) -> PreparedEpisode {
    let size = model.config.image_size;
    let classes = model.vocabs.num_object_classes();
    let obs: Vec<Observation> = (0..steps).map(|_| random_observation(rng, size, classes)).collect();
    let goals: Vec<SubGoal> = (0..steps).map(|_| random_goal(rng, model)).collect();
    model
        .prepare("put a clean apple in the fridge", &obs, &goals)
        .unwrap()
}

fn cls(name: &str) -> usize {
    class_index(name).unwrap()
}

fn g(action: Action, object: &str, receptacle: usize) -> SubGoal {
    SubGoal::new(action, if object.is_empty() { 0 } else { cls(object) }, receptacle)
}

// ---------------------------------------------------------------------------
// Criteria.

/// Full-model finite differences at d=16, T=8.
fn criterion_1(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let mut model = PlannerModel::new(tiny_planner(), world_vocabularies(), corpus_token_vocab(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // Randomize everything so no coordinate sits at a special value.
    for t in model.params.values_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
    }
    let ep = synthetic_episode(&model, &mut rng, 4);
    let steps: Vec<usize> = (0..ep.len()).collect();
    let mask = ModalityMask::full();
    let loss_on = |model: &PlannerModel, backward: bool| -> (f64, Option<hapfi_core::autodiff::Gradients>) {
        let mut tape = Tape::new(&model.params);
        let outs = model.episode_logits(&mut tape, &ep, &steps, &mask).unwrap();
        let mut total = subgoal_loss(&mut tape, &outs[0], &ep.targets[0]).unwrap();
        for (o, t) in outs.iter().zip(&ep.targets).skip(1) {
            let l = subgoal_loss(&mut tape, o, t).unwrap();
            total = tape.add(total, l).unwrap();
        }
        let value = tape.value(total).item();
        (value, backward.then(|| tape.backward(total).unwrap()))
    };
    let (_, grads) = loss_on(&model, true);
    let grads = grads.unwrap();

    // Five-point central stencil: O(eps^4) truncation.
    let eps = 1e-3;
    // Below this magnitude the central difference is round-off (about
    // loss * 1e-16 / eps); such coordinates are held to an absolute bound.
    let tiny = 1e-6;
    let ids: Vec<_> = model.params.ids().collect();
    let mut worst = (0.0f64, String::new());
    let mut worst_abs = (0.0f64, String::new());
    let (mut checked, mut near_zero) = (0usize, 0usize);
    for id in ids {
        let len = model.params.get(id).len();
        let picks = sample(&mut rng, len, len.min(20)).into_vec();
        for k in picks {
            let orig = model.params.get(id).data()[k];
            let mut at_offset = |h: f64| {
                model.params.get_mut(id).data_mut()[k] = orig + h;
                loss_on(&model, false).0
            };
            let (p2, p1, m1, m2) = (at_offset(2.0 * eps), at_offset(eps), at_offset(-eps), at_offset(-2.0 * eps));
            model.params.get_mut(id).data_mut()[k] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * eps);
            let analytic = grads.get(id).data()[k];
            let scale = analytic.abs().max(numeric.abs());
            let at = || format!("{}[{k}]: analytic {analytic:e} numeric {numeric:e}", model.params.name(id));
            if scale < tiny {
                near_zero += 1;
                let err = (analytic - numeric).abs();
                if err > worst_abs.0 {
                    worst_abs = (err, at());
                }
            } else {
                let rel = (analytic - numeric).abs() / scale;
                if rel > worst.0 {
                    worst = (rel, at());
                }
            }
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(worst.0 < 1e-4, || format!("max relative error {:.2e} at {}", worst.0, worst.1))?;
    ensure(worst_abs.0 < 1e-8, || format!("near-zero gradient off by {:.2e} at {}", worst_abs.0, worst_abs.1))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} tensors, {checked} coordinates, max relative error {:.2e} ({near_zero} near-zero gradients within {:.1e} absolute), {:.1}s",
        model.params.len(),
        worst.0,
        worst_abs.0,
        elapsed.as_secs_f64()
    ))
}

/// x_mha and fuse against the straight-line oracles.
fn criterion_2(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let width = 8;
    let mut worst = 0.0f64;
    for heads in [1, 4] {
        for _ in 0..100 {
            let (store, f) = random_fusion(&mut rng, width, heads);
            let (l, valid) = random_language(&mut rng, width);

            let nv = rng.gen_range(1..=3);
            let v = random_mat(&mut rng, nv, width);
            let (vf, lf) = x_mha(&store, &f.exchanges[0], &v, &l, &valid).unwrap();
            let (ov, ol) = oracle_x_mha(&store, &f.exchanges[0], &mat(&v), &mat(&l), &valid);
            worst = worst.max(max_diff(&ov, &vf)).max(max_diff(&ol, &lf));

            let v = random_mat(&mut rng, 2, width);
            let out = f.fuse(&store, &v, &l, &valid).unwrap();
            let (fused, v1, l1) = oracle_fuse(&store, &f, &mat(&v), &mat(&l), &valid);
            ensure(out.fused.len() == 2 * width, || "F width".into())?;
            worst = worst
                .max(max_diff(&vec![fused], &out.fused))
                .max(max_diff(&v1, &out.vision_first))
                .max(max_diff(&l1, &out.language_first));
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("200 instances (h=1, h=4), max deviation {worst:.1e}"))
}

/// Zero output projections make stage-1 fusion the identity, bitwise.
fn criterion_3(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut n = 0;
    for heads in [1, 2, 4] {
        for _ in 0..20 {
            let (mut store, f) = random_fusion(&mut rng, 8, heads);
            let x = &f.exchanges[0];
            for id in [x.proj_language, x.proj_vision] {
                store.get_mut(id).data_mut().fill(0.0);
            }
            let (l, valid) = random_language(&mut rng, 8);
            let v = random_mat(&mut rng, 2, 8);
            let (vf, lf) = x_mha(&store, x, &v, &l, &valid).unwrap();
            let out = f.fuse(&store, &v, &l, &valid).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure(bits(&vf) == bits(&v) && bits(&lf) == bits(&l), || "x_mha is not the identity".into())?;
            ensure(
                bits(&out.vision_first) == bits(&v) && bits(&out.language_first) == bits(&l),
                || "stage one of fuse is not the identity".into(),
            )?;
            n += 1;
        }
    }
    Ok(format!("{n} instances bitwise identical"))
}

fn oracle_visual(frames: &[(Vec<f64>, Vec<f64>)], cur: (&[f64], &[f64])) -> Vec<f64> {
    let d = cur.0.len();
    let mut out = vec![0.0; 2 * d];
    if !frames.is_empty() {
        let l = frames.len() as f64;
        for j in 0..d {
            let so: f64 = frames.iter().map(|f| f.0[j]).sum();
            let sb: f64 = frames.iter().map(|f| f.1[j]).sum();
            out[j] = so / l + sb / l;
        }
    }
    for j in 0..d {
        out[d + j] = cur.0[j] + cur.1[j];
    }
    out
}

/// Visual history integration against brute force, and the model's window.
fn criterion_4(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let d = 16;
    for window in 1..=6 {
        for len in 0..=window {
            let frames: Vec<(Vec<f64>, Vec<f64>)> = (0..len)
                .map(|_| {
                    (
                        (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                        (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                    )
                })
                .collect();
            let mut h = VisualHistory::new(window);
            // Overfill first so eviction is exercised too.
            for _ in 0..window {
                h.push(Tensor::vector(vec![9.0; d]), Tensor::vector(vec![9.0; d]));
            }
            h.clear();
            for (o, b) in &frames {
                h.push(Tensor::vector(o.clone()), Tensor::vector(b.clone()));
            }
            let cur: (Vec<f64>, Vec<f64>) = (
                (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            );
            let got = integrate_visual(&h, (&Tensor::vector(cur.0.clone()), &Tensor::vector(cur.1.clone()))).unwrap();
            let want = oracle_visual(&frames, (&cur.0, &cur.1));
            if len == 0 {
                ensure(got.data()[..d].iter().all(|x| *x == 0.0), || "empty history is not zero".into())?;
            }
            worst = worst.max(got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }

    // The model keeps frames n-l .. n-1 in its window.
    let mut config = tiny_planner();
    config.history_window = 3;
    let model = PlannerModel::new(config, world_vocabularies(), corpus_token_vocab(), 9).unwrap();
    let ep = synthetic_episode(&model, &mut rng, 7);
    for n in 0..ep.len() {
        let inputs = model.encode_inputs(&ep, n).unwrap();
        let lo = n.saturating_sub(3);
        ensure(inputs.history.len() == n - lo, || format!("step {n}: window holds {}", inputs.history.len()))?;
        let mut frames = Vec::new();
        for (k, (o, b)) in (lo..n).zip(inputs.history.frames()) {
            let eo = model.rgb_encoder.embed(&model.params, ep.frames[k].rgb.clone()).unwrap();
            let eb = model.bbox_encoder.embed(&model.params, ep.frames[k].bbox.clone()).unwrap();
            ensure(*o == eo && *b == eb, || format!("step {n}: frame {k} is not in the window"))?;
            frames.push((vec1(&eo), vec1(&eb)));
        }
        let got = integrate_visual(&inputs.history, (&inputs.current_rgb, &inputs.current_bbox)).unwrap();
        let want = oracle_visual(&frames, (inputs.current_rgb.data(), inputs.current_bbox.data()));
        worst = worst.max(got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("buffer lengths 0..=l for l=1..6 plus model window, max deviation {worst:.1e}"))
}

struct Stub(Vec<Vec<SubGoal>>);

impl Predictor for Stub {
    fn predict(&self, e: &Episode) -> CoreResult<Vec<SubGoal>> {
        Ok(self.0[e.id as usize].clone())
    }
}

fn fixture_episode(id: u32, goals: Vec<SubGoal>) -> Episode {
    Episode {
        id,
        instruction: "fixture".into(),
        scene_id: 0,
        split: Split::ValidSeen,
        task: Task {
            kind: TaskKind::PickPlace,
            object: cls("Apple"),
            receptacle: 1,
        },
        agent_start: (0, 0),
        steps: goals
            .into_iter()
            .map(|subgoal| Step {
                observation: Observation {
                    rgb: RgbImage::new(1, 1),
                    bbox_mask: ClassMask::new(1, 1),
                },
                subgoal,
            })
            .collect(),
    }
}

/// Hand-counted metrics on a three-episode fixture, then the boolean-AND
/// oracle on random predictors.
fn criterion_5_fixture(ctx: &mut Ctx) -> Verdict {
    use Action::*;
    let episodes = vec![
        fixture_episode(0, vec![g(Navigate, "Apple", 0), g(PickUp, "Apple", 0), g(Stop, "", 0)]),
        fixture_episode(1, vec![g(Navigate, "CounterTop", 0), g(Put, "Apple", 1)]),
        fixture_episode(
            2,
            vec![g(Navigate, "Knife", 0), g(PickUp, "Knife", 0), g(Slice, "Apple", 0), g(Stop, "", 0)],
        ),
    ];
    let stub = Stub(vec![
        // object wrong at step 1
        vec![g(Navigate, "Apple", 0), g(PickUp, "Bread", 0), g(Stop, "", 0)],
        // action wrong at step 0, receptacle wrong at step 1
        vec![g(Open, "CounterTop", 0), g(Put, "Apple", 2)],
        // everything wrong at step 1
        vec![g(Navigate, "Knife", 0), g(Put, "Mug", 3), g(Slice, "Apple", 0), g(Stop, "", 0)],
    ]);
    let r = ctx.record("fixture", evaluate(&stub, episodes.iter()).unwrap());
    let want = SplitReport {
        steps: 9,
        action: 7,
        object: 7,
        receptacle: 7,
        total: 5,
    };
    ensure(r == want, || format!("counts {r:?}, hand counts {want:?}"))?;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    ensure(
        close(r.action_accuracy(), 700.0 / 9.0)
            && close(r.object_accuracy(), 700.0 / 9.0)
            && close(r.receptacle_accuracy(), 700.0 / 9.0)
            && close(r.total_accuracy(), 500.0 / 9.0),
        || "accuracies differ from the hand counts".into(),
    )?;

    // Random predictors against a per-step boolean-AND count.
    let corpus = generate_corpus(
        &CorpusConfig {
            train_episodes: 40,
            valid_seen_episodes: 0,
            valid_unseen_episodes: 0,
            unseen_scenes: 0,
            ..CorpusConfig::default()
        },
        55,
    )
    .unwrap();
    let vocab = world_vocabularies();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let noise = trial as f64 / 50.0;
        let mut preds = Vec::new();
        let (mut a, mut o, mut rc, mut t, mut n) = (0, 0, 0, 0, 0);
        for e in &corpus.episodes {
            let mut p = Vec::new();
            for s in &e.steps {
                let mut q = s.subgoal;
                if rng.gen_bool(noise) {
                    q.action = Action::from_index(rng.gen_range(0..vocab.num_actions())).unwrap();
                }
                if rng.gen_bool(noise) {
                    q.object = rng.gen_range(0..vocab.num_objects());
                }
                if rng.gen_bool(noise) {
                    q.receptacle = rng.gen_range(0..vocab.num_receptacles());
                }
                let (ha, ho, hr) = (
                    q.action == s.subgoal.action,
                    q.object == s.subgoal.object,
                    q.receptacle == s.subgoal.receptacle,
                );
                a += ha as usize;
                o += ho as usize;
                rc += hr as usize;
                t += (ha && ho && hr) as usize;
                n += 1;
                p.push(q);
            }
            preds.push(p);
        }
        let r = ctx.record("random", evaluate(&Stub(preds), corpus.episodes.iter()).unwrap());
        let want = SplitReport {
            steps: n,
            action: a,
            object: o,
            receptacle: rc,
            total: t,
        };
        ensure(r == want, || format!("trial {trial}: {r:?} vs {want:?}"))?;
    }
    Ok("fixture counts 7/7/7/5 of 9 exact; 50 random predictors match the AND oracle".into())
}

fn criterion_5_bound(ctx: &Ctx) -> Verdict {
    for (label, r) in &ctx.reports {
        let min = r.action.min(r.object).min(r.receptacle);
        ensure(r.total <= min, || format!("{label}: total {} exceeds per-head minimum {min}", r.total))?;
        ensure(
            r.total_accuracy() <= r.action_accuracy().min(r.object_accuracy()).min(r.receptacle_accuracy()),
            || format!("{label}: Total accuracy exceeds a per-head accuracy"),
        )?;
    }
    Ok(format!("Total <= min(per-head) on all {} reports", ctx.reports.len()))
}

/// Overfits a 64-episode corpus.
fn criterion_6(ctx: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let corpus = generate_corpus(
        &CorpusConfig {
            train_episodes: 64,
            valid_seen_episodes: 16,
            valid_unseen_episodes: 16,
            ..CorpusConfig::default()
        },
        7,
    )
    .unwrap();
    let config = TrainConfig {
        epochs: 200,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::from_scratch((world_vocabularies(), corpus_token_vocab()), config).unwrap();
    let prepared = prepare_episodes(&trainer.model, corpus.split(Split::Train)).unwrap();
    let mut best = SplitReport::default();
    let (mut reached, mut low_loss) = (None, None);
    let mut reports = Vec::new();
    trainer
        .train(&prepared, |s, model, _| {
            let planner = MaskedPlanner {
                model,
                mask: ModalityMask::full(),
            };
            let r = evaluate(&planner, corpus.split(Split::Train)).unwrap();
            reports.push(r);
            eprintln!("  [6] epoch {} loss {:.4} train Total {:.2}", s.epoch, s.mean_loss, r.total_accuracy());
            if r.total_accuracy() > best.total_accuracy() {
                best = r;
            }
            if reached.is_none() && r.total_accuracy() >= 95.0 {
                reached = Some(s.epoch);
            }
            // The loss target rides along on the same run.
            if low_loss.is_none() && s.mean_loss < 0.05 {
                low_loss = Some(s.epoch);
            }
            if reached.is_some() && low_loss.is_some() {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
    for r in reports {
        ctx.record("overfit", r);
    }
    let elapsed = start.elapsed();
    let epochs = trainer.epochs_done;
    ctx.overfit = Some((trainer.model, corpus));
    let epoch = reached.ok_or_else(|| format!("best train Total {:.2} after 200 epochs", best.total_accuracy()))?;
    let loss_epoch = low_loss.ok_or_else(|| "mean training loss never fell below 0.05".to_string())?;
    ensure(elapsed <= Duration::from_secs(30 * 60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "train Total >= 95% at epoch {epoch} (best {:.2}), loss < 0.05 at epoch {loss_epoch}, {epochs} epochs in {:.0}s",
        best.total_accuracy(),
        elapsed.as_secs_f64()
    ))
}

/// Epoch budget shared by both rows of the ablation check.
const ABLATION_EPOCHS: usize = 60;

fn ablation_corpus(seed: u64) -> Corpus {
    generate_corpus(
        &CorpusConfig {
            // Enough seen scenes that the full model cannot memorize layouts.
            scenes: 40,
            unseen_scenes: 5,
            train_episodes: 160,
            valid_seen_episodes: 48,
            valid_unseen_episodes: 48,
            ..CorpusConfig::default()
        },
        derive_seed(seed, 77),
    )
    .unwrap()
}

/// History ablation direction over three seeds.
fn criterion_7(ctx: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let rows = vec![
        ("full".to_string(), ModalityMask::full()),
        ("no_history".to_string(), ModalityMask::no_history()),
    ];
    let mut holds = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let corpus = ablation_corpus(seed);
        let base = TrainConfig {
            epochs: ABLATION_EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let reports = ablation_grid(&corpus, &base, &rows, &(world_vocabularies(), corpus_token_vocab()), |label, s| {
            eprintln!("  [7] seed {seed} {label} epoch {} loss {:.4}", s.epoch, s.mean_loss);
        })
        .unwrap();
        let acc = |row: usize, split| reports[row].split(split).unwrap().total_accuracy();
        for rep in &reports {
            for (split, r) in &rep.splits {
                ctx.record(&format!("ablation {} {}", rep.label, split.name()), *r);
            }
        }
        let (fs, fu, ns, nu) = (
            acc(0, Split::ValidSeen),
            acc(0, Split::ValidUnseen),
            acc(1, Split::ValidSeen),
            acc(1, Split::ValidUnseen),
        );
        let a = fu >= nu;
        let b = (ns - nu) > (fs - fu);
        holds += (a && b) as usize;
        let line = format!(
            "seed {seed}: full {fs:.1}/{fu:.1}, no_history {ns:.1}/{nu:.1} (a {}, b {})",
            if a { "holds" } else { "fails" },
            if b { "holds" } else { "fails" }
        );
        eprintln!("  [7] {line}");
        lines.push(line);
    }
    let elapsed = start.elapsed();
    let detail = format!("{holds}/3 seeds; {}; {:.0}s", lines.join("; "), elapsed.as_secs_f64());
    ensure(holds >= 2, || detail.clone())?;
    ensure(elapsed <= Duration::from_secs(2 * 3600), || format!("took {elapsed:?}"))?;
    Ok(detail)
}

/// Every ground-truth sequence executes to success.
fn criterion_8(_: &mut Ctx) -> Verdict {
    let mut total = 0;
    for seed in [2024u64, 2025] {
        let corpus = generate_corpus(&CorpusConfig::default(), seed).unwrap();
        for e in &corpus.episodes {
            let scene = corpus.scene(e.scene_id).unwrap();
            // Raw stepping.
            let mut state = e.initial_state(scene);
            for (k, s) in e.steps.iter().enumerate() {
                ensure(state.render() == s.observation, || format!("episode {}: step {k} frame differs", e.id))?;
                let out = state.step(&s.subgoal, Some(&e.task));
                ensure(out == Outcome::Success, || format!("episode {}: step {k} failed", e.id))?;
            }
            ensure(e.task.is_satisfied(&state), || format!("episode {}: goal not reached", e.id))?;
            // Through the agent loop.
            let mut policy = ScriptedPolicy::new(e.subgoals());
            let t = run_agent(
                &mut policy,
                &e.initial_state(scene),
                &e.instruction,
                &e.task,
                &mut FailureInjector::none(),
                e.steps.len(),
                0,
            )
            .unwrap();
            ensure(t.status == TerminalStatus::Success, || format!("episode {}: {:?}", e.id, t.status))?;
            total += 1;
        }
    }
    Ok(format!("{total}/{total} ground-truth sequences succeed"))
}

fn recovery_scene() -> Scene {
    let mut palette = vec![[0u8; 3]; 21];
    for (c, p) in palette.iter_mut().enumerate().skip(1) {
        *p = [(c * 11) as u8, (255 - c * 9) as u8, (c * 37 % 256) as u8];
    }
    Scene {
        id: 900,
        width: 8,
        height: 8,
        cell_size: 4,
        items: vec![
            Placement {
                class: cls("CounterTop"),
                cell: (6, 1),
            },
            Placement {
                class: cls("Apple"),
                cell: (1, 6),
            },
        ],
        palette,
        floor: [40, 40, 40],
        agent_start: (3, 3),
    }
}

type Row = (SubGoal, Outcome, Option<FailureKind>);

fn rows(t: &Trajectory) -> Vec<Row> {
    t.records.iter().map(|r| (r.subgoal, r.outcome, r.injected)).collect()
}

/// Scripted recovery from both failure kinds, plus the learned model's rate.
fn criterion_9(ctx: &mut Ctx) -> Verdict {
    use Action::*;
    use Outcome::{Failed as F, Success as S};
    let scene = recovery_scene();
    scene.validate().unwrap();
    let counter_r = cls("CounterTop") - receptacle_object(0);
    let task = Task {
        kind: TaskKind::PickPlace,
        object: cls("Apple"),
        receptacle: counter_r,
    };
    let nav_apple = g(Navigate, "Apple", 0);
    let pick_apple = g(PickUp, "Apple", 0);
    let nav_counter = g(Navigate, "CounterTop", 0);
    let put = g(Put, "Apple", counter_r);
    let stop = SubGoal::stop();
    let nav = Some(FailureKind::NavigationError);
    let man = Some(FailureKind::ManipulationError);

    let cases: Vec<(ScheduledFailure, Vec<Row>)> = vec![
        (
            ScheduledFailure {
                step: 0,
                kind: FailureKind::NavigationError,
            },
            vec![
                (nav_apple, S, nav),
                (pick_apple, F, None),
                (nav_apple, S, None),
                (pick_apple, S, None),
                (nav_counter, S, None),
                (put, S, None),
                (stop, S, None),
            ],
        ),
        (
            ScheduledFailure {
                step: 2,
                kind: FailureKind::NavigationError,
            },
            vec![
                (nav_apple, S, None),
                (pick_apple, S, None),
                (nav_counter, S, nav),
                (put, F, None),
                (nav_counter, S, None),
                (put, S, None),
                (stop, S, None),
            ],
        ),
        (
            ScheduledFailure {
                step: 1,
                kind: FailureKind::ManipulationError,
            },
            vec![
                (nav_apple, S, None),
                (pick_apple, S, man),
                (nav_counter, S, None),
                (put, F, None),
                (nav_apple, S, None),
                (pick_apple, S, None),
                (nav_counter, S, None),
                (put, S, None),
                (stop, S, None),
            ],
        ),
    ];
    let start = WorldState::new(&scene);
    for (k, (failure, want)) in cases.iter().enumerate() {
        let mut injector = FailureInjector::new(vec![*failure], 17 + k as u64);
        let mut policy = RecoveryOracle::for_task(&task);
        let t = run_agent(&mut policy, &start, "put an apple on the countertop", &task, &mut injector, 20, 17).unwrap();
        let got = rows(&t);
        ensure(got == *want, || format!("{failure}: trajectory {got:?}"))?;
        ensure(t.status == TerminalStatus::Success, || format!("{failure}: {:?}", t.status))?;
        let s = t.summary();
        ensure(s.failures_injected == 1 && s.failures_recovered == 1, || format!("{failure}: {s}"))?;
    }

    let learned = match &ctx.overfit {
        Some((model, corpus)) => {
            let eps: Vec<&Episode> = corpus.split(Split::Train).collect();
            let stats =
                recovery_trials(&eps, &corpus.scenes, 50, 9, || ModelPolicy::new(model, ModalityMask::full())).unwrap();
            format!(
                "learned model recovered {}/{} injected failures ({:.0}%, reported only)",
                stats.recovered,
                stats.injected,
                100.0 * stats.rate()
            )
        }
        None => "learned model unavailable".into(),
    };
    Ok(format!("oracle recovers navigation and manipulation failures exactly; {learned}"))
}

/// Determinism, checkpoint fidelity and format round trips.
fn criterion_10(ctx: &mut Ctx) -> Verdict {
    let small = CorpusConfig {
        scenes: 4,
        unseen_scenes: 1,
        train_episodes: 10,
        valid_seen_episodes: 4,
        valid_unseen_episodes: 4,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&small, 31).unwrap();
    ensure(generate_corpus(&small, 31).unwrap() == corpus, || "corpus generation differs".into())?;

    let config = TrainConfig {
        planner: PlannerConfig {
            width: 16,
            heads: 2,
            ..PlannerConfig::default()
        },
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::from_scratch((world_vocabularies(), corpus_token_vocab()), config.clone()).unwrap();
        let prepared = prepare_episodes(&t.model, corpus.split(Split::Train)).unwrap();
        let trace = t.train(&prepared, |_, _, _| Control::Continue).unwrap();
        let ep = &corpus.episodes[0];
        let scene = corpus.scene(ep.scene_id).unwrap();
        let mut injector = FailureInjector::new(
            vec![ScheduledFailure {
                step: 1,
                kind: FailureKind::NavigationError,
            }],
            3,
        );
        let traj = run_agent(
            &mut ModelPolicy::new(&t.model, ModalityMask::full()),
            &ep.initial_state(scene),
            &ep.instruction,
            &ep.task,
            &mut injector,
            12,
            3,
        )
        .unwrap();
        (t, trace, traj)
    };
    let (t1, trace1, traj1) = run();
    let (t2, trace2, traj2) = run();
    let bits = |t: &Trainer| -> Vec<u64> { t.model.params.values().iter().flat_map(|x| x.data()).map(|x| x.to_bits()).collect() };
    ensure(bits(&t1) == bits(&t2), || "trained weights differ between runs".into())?;
    ensure(
        trace1.iter().map(|p| (p.step, p.loss.to_bits())).eq(trace2.iter().map(|p| (p.step, p.loss.to_bits()))),
        || "loss traces differ".into(),
    )?;
    ensure(traj1 == traj2, || "rollouts differ".into())?;

    // Checkpoint fidelity on the overfit model when available.
    let dir = tempfile::tempdir().unwrap();
    let (model, eval_corpus) = match &ctx.overfit {
        Some((m, c)) => (m, c),
        None => (&t1.model, &corpus),
    };
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &Checkpoint::from_model(model, &TrainConfig::default())).unwrap();
    let loaded = checkpoint::load(&path).unwrap().into_model().unwrap();
    let mut pairs = Vec::new();
    for split in Split::ALL {
        let mask = ModalityMask::full();
        let before = evaluate(&MaskedPlanner { model, mask }, eval_corpus.split(split)).unwrap();
        let after = evaluate(&MaskedPlanner { model: &loaded, mask }, eval_corpus.split(split)).unwrap();
        pairs.push((split, before, after));
    }

    // Format round trips.
    let v = world_vocabularies();
    let episodes = eval_corpus.episodes.clone();
    let ep_path = dir.path().join("episodes.jsonl");
    formats::write_episodes(&ep_path, &episodes, &v).unwrap();
    ensure(formats::read_episodes(&ep_path, &v).unwrap() == episodes, || "episodes changed".into())?;
    let tr_path = dir.path().join("trajectories.jsonl");
    formats::write_trajectories(&tr_path, &[traj1.clone(), traj2], &v).unwrap();
    let back = formats::read_trajectories(&tr_path, &v).unwrap();
    ensure(back.len() == 2 && back[0] == traj1, || "trajectories changed".into())?;
    for (split, before, after) in pairs {
        ctx.record("checkpoint before", before);
        ctx.record("checkpoint after", after);
        ensure(before == after, || format!("{}: {before:?} became {after:?}", split.name()))?;
    }
    Ok(format!(
        "two runs bit-identical ({} optimizer steps); checkpoint kept every accuracy; {} episodes and 2 trajectories round-trip",
        trace1.len(),
        episodes.len()
    ))
}

fn run(ctx: &mut Ctx, f: fn(&mut Ctx) -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(|| f(ctx))) {
        Ok(v) => v,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and filters: only the whole suite exists.
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // HAPFI_CRITERIA=1,2,3 runs a subset while iterating.
    let only: Option<Vec<usize>> = std::env::var("HAPFI_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut ctx = Ctx::default();
    let order: [(usize, fn(&mut Ctx) -> Verdict); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5_fixture),
        (8, criterion_8),
        (6, criterion_6),
        (9, criterion_9),
        (10, criterion_10),
        (7, criterion_7),
    ];
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    for (n, f) in order {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let v = run(&mut ctx, f);
        eprintln!("criterion {n} finished in {:.1}s", t.elapsed().as_secs_f64());
        results.push((n, v));
    }

    // Criterion 5 also covers every report produced above.
    if let Some(fixture) = results.iter().position(|(n, _)| *n == 5) {
        let bound = criterion_5_bound(&ctx);
        results[fixture].1 = match (&results[fixture].1, bound) {
            (Ok(a), Ok(b)) => Ok(format!("{a}; {b}")),
            (Err(e), _) => Err(e.clone()),
            (_, Err(e)) => Err(e),
        };
    }

    results.sort_by_key(|(n, _)| *n);
    let mut failed = 0;
    for (n, v) in &results {
        match v {
            Ok(detail) => println!("criterion {n}: PASS - {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL - {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
