//! Sub-goal vocabularies, the three classifier heads and their loss.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp3;
use crate::params::ParamBuilder;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    PickUp,
    Put,
    Open,
    Close,
    ToggleOn,
    ToggleOff,
    Slice,
    Navigate,
    Stop,
}

impl Action {
    pub const ALL: [Action; 9] = [
        Action::PickUp,
        Action::Put,
        Action::Open,
        Action::Close,
        Action::ToggleOn,
        Action::ToggleOff,
        Action::Slice,
        Action::Navigate,
        Action::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::PickUp => "PickUp",
            Action::Put => "Put",
            Action::Open => "Open",
            Action::Close => "Close",
            Action::ToggleOn => "ToggleOn",
            Action::ToggleOff => "ToggleOff",
            Action::Slice => "Slice",
            Action::Navigate => "Navigate",
            Action::Stop => "Stop",
        }
    }

    /// Word used when the action is written into the sub-goal history.
    pub fn history_word(self) -> &'static str {
        match self {
            Action::PickUp => "Pickup",
            other => other.name(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown action {s}")))
    }
}

/// Name of the object class used when no object applies (index 0).
pub const NO_OBJECT: &str = "None";
/// Name of the receptacle class meaning "no receptacle needed" (index 0).
pub const EMPTY_RECEPTACLE: &str = "empty";

/// Class names for the object and receptacle heads. Index 0 of each list is
/// the null class; object indices double as box-mask class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    objects: Vec<String>,
    receptacles: Vec<String>,
}

impl Vocabularies {
    /// Builds vocabularies from the non-null class names.
    pub fn new<S: AsRef<str>>(objects: &[S], receptacles: &[S]) -> Result<Self> {
        let mut o = Vec::with_capacity(objects.len() + 1);
        o.push(NO_OBJECT.to_string());
        o.extend(objects.iter().map(|s| s.as_ref().to_string()));
        let mut r = Vec::with_capacity(receptacles.len() + 1);
        r.push(EMPTY_RECEPTACLE.to_string());
        r.extend(receptacles.iter().map(|s| s.as_ref().to_string()));
        Self::from_full_lists(o, r)
    }

    /// Builds vocabularies from complete lists whose first entries are the
    /// null classes.
    pub fn from_full_lists(objects: Vec<String>, receptacles: Vec<String>) -> Result<Self> {
        if objects.first().map(String::as_str) != Some(NO_OBJECT) {
            return Err(Error::Validation(format!("object vocabulary must start with {NO_OBJECT}")));
        }
        if receptacles.first().map(String::as_str) != Some(EMPTY_RECEPTACLE) {
            return Err(Error::Validation(format!(
                "receptacle vocabulary must start with {EMPTY_RECEPTACLE}"
            )));
        }
        for list in [&objects, &receptacles] {
            for (i, name) in list.iter().enumerate() {
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(Error::Validation(format!("bad class name {name:?}")));
                }
                if list[..i].contains(name) {
                    return Err(Error::Validation(format!("duplicate class name {name}")));
                }
            }
        }
        if objects.len() > 256 {
            return Err(Error::Validation("at most 255 object classes fit a box mask".into()));
        }
        Ok(Self { objects, receptacles })
    }

    /// Pads both lists with unused placeholder classes up to the requested
    /// head sizes (null classes included).
    pub fn padded_to(mut self, objects: usize, receptacles: usize) -> Result<Self> {
        while self.objects.len() < objects {
            let name = format!("ExtraObject{}", self.objects.len());
            self.objects.push(name);
        }
        while self.receptacles.len() < receptacles {
            let name = format!("ExtraReceptacle{}", self.receptacles.len());
            self.receptacles.push(name);
        }
        Self::from_full_lists(self.objects, self.receptacles)
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn receptacles(&self) -> &[String] {
        &self.receptacles
    }

    pub fn num_actions(&self) -> usize {
        Action::ALL.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_receptacles(&self) -> usize {
        self.receptacles.len()
    }

    /// Number of nonzero classes a box mask may carry.
    pub fn num_object_classes(&self) -> usize {
        self.objects.len() - 1
    }

    pub fn object(&self, name: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| Error::Validation(format!("unknown object {name}")))
    }

    pub fn receptacle(&self, name: &str) -> Result<usize> {
        self.receptacles
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| Error::Validation(format!("unknown receptacle {name}")))
    }

    pub fn object_name(&self, i: usize) -> &str {
        &self.objects[i]
    }

    pub fn receptacle_name(&self, i: usize) -> &str {
        &self.receptacles[i]
    }

    /// Builds a sub-goal from names, e.g. `("Put", "Knife", "Bowl")`.
    pub fn subgoal(&self, action: &str, object: &str, receptacle: &str) -> Result<SubGoal> {
        Ok(SubGoal {
            action: action.parse()?,
            object: self.object(object)?,
            receptacle: self.receptacle(receptacle)?,
        })
    }

    pub fn validate(&self, g: &SubGoal) -> Result<()> {
        if g.object >= self.objects.len() || g.receptacle >= self.receptacles.len() {
            return Err(Error::Validation(format!("sub-goal {g:?} outside vocabularies")));
        }
        Ok(())
    }

    pub fn describe(&self, g: &SubGoal) -> String {
        format!(
            "{} {} {}",
            g.action,
            self.object_name(g.object),
            self.receptacle_name(g.receptacle)
        )
    }
}

/// One planned step: action, object (or navigation destination) and
/// receptacle, as vocabulary indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubGoal {
    pub action: Action,
    pub object: usize,
    pub receptacle: usize,
}

impl SubGoal {
    pub fn new(action: Action, object: usize, receptacle: usize) -> Self {
        Self {
            action,
            object,
            receptacle,
        }
    }

    pub fn stop() -> Self {
        Self::new(Action::Stop, 0, 0)
    }
}

/// Raw head outputs for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTriple {
    pub action: Vec<f64>,
    pub object: Vec<f64>,
    pub receptacle: Vec<f64>,
}

/// Tape handles of the head outputs.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub action: Var,
    pub object: Var,
    pub receptacle: Var,
}

impl HeadOutputs {
    pub fn values(&self, tape: &Tape) -> LogitTriple {
        LogitTriple {
            action: tape.value(self.action).data().to_vec(),
            object: tape.value(self.object).data().to_vec(),
            receptacle: tape.value(self.receptacle).data().to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub action: Mlp3,
    pub object: Mlp3,
    pub receptacle: Mlp3,
    pub input_width: usize,
}

impl HeadParams {
    pub fn new(b: &mut ParamBuilder, input: usize, hidden: usize, vocabs: &Vocabularies) -> Result<Self> {
        let mut s = b.scoped("heads");
        Ok(Self {
            action: Mlp3::new(&mut s, "action", input, hidden, vocabs.num_actions())?,
            object: Mlp3::new(&mut s, "object", input, hidden, vocabs.num_objects())?,
            receptacle: Mlp3::new(&mut s, "receptacle", input, hidden, vocabs.num_receptacles())?,
            input_width: input,
        })
    }

    /// Logits of the three heads for a fused feature `F` (`1×2d` or `[2d]`).
    pub fn predict_logits(&self, tape: &mut Tape, fused: Var) -> Result<HeadOutputs> {
        let width = tape.value(fused).len();
        if width != self.input_width {
            return Err(crate::error::shape_err(
                "predict_logits",
                tape.shape(fused),
                &[self.input_width],
            ));
        }
        let x = tape.reshape(fused, &[1, width])?;
        let a = self.action.forward(tape, x)?;
        let o = self.object.forward(tape, x)?;
        let r = self.receptacle.forward(tape, x)?;
        Ok(HeadOutputs {
            action: tape.reshape(a, &[tape.value(a).len()])?,
            object: tape.reshape(o, &[tape.value(o).len()])?,
            receptacle: tape.reshape(r, &[tape.value(r).len()])?,
        })
    }
}

/// Sum of the three cross-entropies against `target`.
pub fn subgoal_loss(tape: &mut Tape, logits: &HeadOutputs, target: &SubGoal) -> Result<Var> {
    let a = tape.cross_entropy(logits.action, target.action.index())?;
    let o = tape.cross_entropy(logits.object, target.object)?;
    let r = tape.cross_entropy(logits.receptacle, target.receptacle)?;
    let ao = tape.add(a, o)?;
    tape.add(ao, r)
}

/// Convenience: loss value for plain logit vectors.
pub fn subgoal_loss_value(logits: &LogitTriple, target: &SubGoal) -> Result<f64> {
    let store = crate::params::ParamStore::new();
    let mut tape = Tape::new(&store);
    let outputs = HeadOutputs {
        action: tape.constant(Tensor::vector(logits.action.clone()))?,
        object: tape.constant(Tensor::vector(logits.object.clone()))?,
        receptacle: tape.constant(Tensor::vector(logits.receptacle.clone()))?,
    };
    let l = subgoal_loss(&mut tape, &outputs, target)?;
    Ok(tape.value(l).item())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A decoded prediction with its interpretation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodedSubGoal {
    pub subgoal: SubGoal,
    /// For `Navigate`, the object head names where to go.
    pub destination: Option<usize>,
    /// For `Stop`, object and receptacle are kept but carry no meaning.
    pub inert: bool,
}

pub fn decode_subgoal(logits: &LogitTriple) -> DecodedSubGoal {
    let action = Action::from_index(argmax(&logits.action)).unwrap_or(Action::PickUp);
    let subgoal = SubGoal::new(action, argmax(&logits.object), argmax(&logits.receptacle));
    DecodedSubGoal {
        subgoal,
        destination: (action == Action::Navigate).then_some(subgoal.object),
        inert: action == Action::Stop,
    }
}

impl fmt::Display for SubGoal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}, {})", self.action, self.object, self.receptacle)
    }
}
