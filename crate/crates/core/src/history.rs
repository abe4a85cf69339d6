//! Visual and sub-goal histories and their integration into the visual
//! token pair `V` and the language sequence `L`.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::heads::{SubGoal, Vocabularies};
use crate::tensor::Tensor;

/// The last `window` (RGB, box) embedding pairs, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualHistory<E> {
    window: usize,
    frames: VecDeque<(E, E)>,
}

impl<E> VisualHistory<E> {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            frames: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Appends a pair and evicts the oldest once the window is exceeded.
    pub fn push(&mut self, rgb: E, bbox: E) {
        self.frames.push_back((rgb, bbox));
        while self.frames.len() > self.window {
            self.frames.pop_front();
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = &(E, E)> {
        self.frames.iter()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}

fn check_width(t: &Tensor, d: usize) -> Result<()> {
    if t.len() != d {
        return Err(shape_err("integrate_visual", t.shape(), &[d]));
    }
    Ok(())
}

/// Mean of the stored embeddings of one modality (zero when empty).
fn frame_mean(history: &VisualHistory<Tensor>, pick: impl Fn(&(Tensor, Tensor)) -> &Tensor, d: usize) -> Vec<f64> {
    let mut acc = alloc::vec![0.0; d];
    for f in history.frames() {
        for (a, v) in acc.iter_mut().zip(pick(f).data()) {
            *a += v;
        }
    }
    if !history.is_empty() {
        let inv = 1.0 / history.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    acc
}

/// `V = [mean(E^O_hist) + mean(E^B_hist) ; E^O_n + E^B_n]` as a `2×d`
/// matrix. The mean is over the stored frames and is the zero vector for an
/// empty history.
pub fn integrate_visual(history: &VisualHistory<Tensor>, current: (&Tensor, &Tensor)) -> Result<Tensor> {
    let d = current.0.len();
    check_width(current.1, d)?;
    for (o, b) in history.frames() {
        check_width(o, d)?;
        check_width(b, d)?;
    }
    let mo = frame_mean(history, |f| &f.0, d);
    let mb = frame_mean(history, |f| &f.1, d);
    let mut data = Vec::with_capacity(2 * d);
    data.extend(mo.iter().zip(&mb).map(|(a, b)| a + b));
    data.extend(current.0.data().iter().zip(current.1.data()).map(|(a, b)| a + b));
    Tensor::new(alloc::vec![2, d], data)
}

/// Tape version of [`integrate_visual`]; embeddings are `1×d` nodes.
pub fn integrate_visual_on_tape(tape: &mut Tape, history: &VisualHistory<Var>, current: (Var, Var)) -> Result<Var> {
    let cur = tape.add(current.0, current.1)?;
    let hist = if history.is_empty() {
        tape.zeros_like(cur)?
    } else {
        let inv = 1.0 / history.len() as f64;
        let mut frames = history.frames();
        let (o0, b0) = *frames.next().expect("non-empty");
        let (mut so, mut sb) = (o0, b0);
        for &(o, b) in frames {
            so = tape.add(so, o)?;
            sb = tape.add(sb, b)?;
        }
        let mo = tape.scale(so, inv)?;
        let mb = tape.scale(sb, inv)?;
        tape.add(mo, mb)?
    };
    tape.concat_rows(&[hist, cur])
}

/// Completed (or attempted) sub-goals in execution order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubGoalHistory {
    goals: Vec<SubGoal>,
}

impl SubGoalHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_goals(goals: Vec<SubGoal>) -> Self {
        Self { goals }
    }

    pub fn push(&mut self, g: SubGoal) {
        self.goals.push(g);
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    pub fn goals(&self) -> &[SubGoal] {
        &self.goals
    }

    /// `"action object [receptacle]"` per sub-goal, space-separated. The
    /// null object and the `empty` receptacle are left out.
    pub fn render(&self, vocabs: &Vocabularies) -> String {
        render_subgoals(&self.goals, vocabs)
    }
}

pub fn render_subgoals(goals: &[SubGoal], vocabs: &Vocabularies) -> String {
    let mut words: Vec<&str> = Vec::with_capacity(goals.len() * 3);
    for g in goals {
        words.push(g.action.history_word());
        if g.object != 0 {
            words.push(vocabs.object_name(g.object));
        }
        if g.receptacle != 0 {
            words.push(vocabs.receptacle_name(g.receptacle));
        }
    }
    words.join(" ")
}

/// `L = E^I + E^S`, element-wise.
pub fn integrate_linguistic(instruction: &Tensor, subgoals: &Tensor) -> Result<Tensor> {
    if instruction.shape() != subgoals.shape() {
        return Err(shape_err("integrate_linguistic", instruction.shape(), subgoals.shape()));
    }
    instruction.add(subgoals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::Action;
    use crate::params::ParamStore;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
        Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn empty_history_gives_zero_history_token() {
        let h = VisualHistory::new(4);
        let o = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![0.5, -1.0]);
        let v = integrate_visual(&h, (&o, &b)).unwrap();
        assert_eq!(v.shape(), &[2, 2]);
        assert_eq!(v.data(), &[0.0, 0.0, 1.5, 1.0]);
    }

    #[test]
    fn window_of_one() {
        let mut h = VisualHistory::new(1);
        h.push(Tensor::vector(vec![1.0, 1.0]), Tensor::vector(vec![2.0, 0.0]));
        let v = integrate_visual(&h, (&Tensor::vector(vec![3.0, 4.0]), &Tensor::vector(vec![5.0, 6.0]))).unwrap();
        assert_eq!(v.data(), &[3.0, 1.0, 8.0, 10.0]);
    }

    #[test]
    fn matches_direct_summation_for_every_fill_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 6;
        let pushes: Vec<(Tensor, Tensor)> = (0..4).map(|_| (rv(&mut rng, d), rv(&mut rng, d))).collect();
        let cur = (rv(&mut rng, d), rv(&mut rng, d));
        for n in 0..=4 {
            let mut h = VisualHistory::new(4);
            for (o, b) in &pushes[..n] {
                h.push(o.clone(), b.clone());
            }
            let v = integrate_visual(&h, (&cur.0, &cur.1)).unwrap();
            for j in 0..d {
                let mut so = 0.0;
                let mut sb = 0.0;
                for (o, b) in &pushes[..n] {
                    so += o.data()[j];
                    sb += b.data()[j];
                }
                let expect = if n == 0 { 0.0 } else { so / n as f64 + sb / n as f64 };
                assert!((v.get2(0, j) - expect).abs() < 1e-12);
                assert_eq!(v.get2(1, j), cur.0.data()[j] + cur.1.data()[j]);
            }
        }
    }

    #[test]
    fn tape_and_value_integration_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 5;
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let mut hv = VisualHistory::new(3);
        let mut ht = VisualHistory::new(3);
        for _ in 0..5 {
            let (o, b) = (rv(&mut rng, d), rv(&mut rng, d));
            let vo = tape.constant(o.reshape(vec![1, d]).unwrap()).unwrap();
            let vb = tape.constant(b.reshape(vec![1, d]).unwrap()).unwrap();
            hv.push(o, b);
            ht.push(vo, vb);
        }
        let (o, b) = (rv(&mut rng, d), rv(&mut rng, d));
        let co = tape.constant(o.reshape(vec![1, d]).unwrap()).unwrap();
        let cb = tape.constant(b.reshape(vec![1, d]).unwrap()).unwrap();
        let on_tape = integrate_visual_on_tape(&mut tape, &ht, (co, cb)).unwrap();
        let direct = integrate_visual(&hv, (&o, &b)).unwrap();
        assert!(tape.value(on_tape).max_abs_diff(&direct) < 1e-15);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let h = VisualHistory::new(2);
        assert!(integrate_visual(&h, (&Tensor::vector(vec![1.0]), &Tensor::vector(vec![1.0, 2.0]))).is_err());
    }

    #[test]
    fn push_evicts_oldest() {
        let mut h = VisualHistory::new(4);
        h.push(0u32, 0u32);
        assert_eq!(h.len(), 1);
        for i in 1..6u32 {
            h.push(i, i);
        }
        let kept: Vec<u32> = h.frames().map(|f| f.0).collect();
        assert_eq!(kept, vec![2, 3, 4, 5]);
    }

    fn vocabs() -> Vocabularies {
        Vocabularies::new(&["Pencil", "Knife", "Bowl"], &["Bowl"]).unwrap()
    }

    #[test]
    fn render_examples() {
        let v = vocabs();
        assert_eq!(SubGoalHistory::new().render(&v), "");
        let one = SubGoalHistory::from_goals(vec![v.subgoal("PickUp", "Pencil", "empty").unwrap()]);
        assert_eq!(one.render(&v), "Pickup Pencil");
        let two = SubGoalHistory::from_goals(vec![
            v.subgoal("PickUp", "Knife", "empty").unwrap(),
            v.subgoal("Put", "Knife", "Bowl").unwrap(),
        ]);
        let oracle = ["Pickup Knife", "Put Knife Bowl"].join(" ");
        assert_eq!(two.render(&v), oracle);
        assert_eq!(two.render(&v), "Pickup Knife Put Knife Bowl");
    }

    #[test]
    fn stop_renders_without_object() {
        let v = vocabs();
        let h = SubGoalHistory::from_goals(vec![SubGoal::new(Action::Stop, 0, 0)]);
        assert_eq!(h.render(&v), "Stop");
    }

    #[test]
    fn linguistic_sum() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let z = Tensor::zeros(vec![2, 2]);
        assert_eq!(integrate_linguistic(&a, &z).unwrap(), a);
        let neg = a.scale(-1.0);
        assert!(integrate_linguistic(&a, &neg).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(integrate_linguistic(&a, &Tensor::zeros(vec![1, 2])).is_err());
    }
}
