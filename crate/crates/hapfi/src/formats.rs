//! Newline-delimited JSON records for scenes, episodes and trajectories,
//! plus the one-token-per-line vocabulary file.
//!
//! Every record carries `"version": 1`. Class labels are written as names,
//! images as flat integer arrays with explicit height and width.

use std::fs;
use std::path::{Path, PathBuf};

use hapfi_core::dataset::{Corpus, CorpusConfig, Episode, Placement, Scene, Split, Step};
use hapfi_core::encoders::{ClassMask, Observation, RgbImage, TokenVocab};
use hapfi_core::heads::{Action, SubGoal, Vocabularies};
use hapfi_core::simulator::{FailureKind, ScheduledFailure, TerminalStatus, Trajectory, TrajectoryRecord};
use hapfi_core::world::{receptacle_object, Outcome, Task, TaskKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HapfiError, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CORPUS_CONFIG_FILE: &str = "corpus.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    template: String,
    object: String,
    receptacle: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    height: usize,
    width: usize,
    rgb: Vec<u8>,
    bbox_mask: Vec<u8>,
    action: String,
    object: String,
    receptacle: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outcome: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    injected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    version: u32,
    id: u32,
    instruction: String,
    scene_id: u32,
    split: String,
    task: TaskRecord,
    agent_start: [usize; 2],
    steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryFileRecord {
    version: u32,
    instruction: String,
    scene_id: u32,
    task: TaskRecord,
    agent_start: [usize; 2],
    seed: u64,
    schedule: Vec<String>,
    status: String,
    steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    class: String,
    cell: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    version: u32,
    id: u32,
    width: usize,
    height: usize,
    cell_size: usize,
    floor: [u8; 3],
    agent_start: [usize; 2],
    items: Vec<ItemRecord>,
    /// Colour per object class id.
    palette: Vec<[u8; 3]>,
}

type Conv<T> = std::result::Result<T, String>;

fn check_version(v: u32) -> Conv<()> {
    if v != FORMAT_VERSION {
        return Err(format!("unsupported format version {v}"));
    }
    Ok(())
}

fn object_index(v: &Vocabularies, name: &str) -> Conv<usize> {
    v.object(name).map_err(|e| e.to_string())
}

fn receptacle_index(v: &Vocabularies, name: &str) -> Conv<usize> {
    v.receptacle(name).map_err(|e| e.to_string())
}

fn task_to_record(t: &Task, v: &Vocabularies) -> TaskRecord {
    TaskRecord {
        template: t.kind.name().into(),
        object: v.object_name(t.object).into(),
        receptacle: v.receptacle_name(t.receptacle).into(),
    }
}

fn task_from_record(r: &TaskRecord, v: &Vocabularies) -> Conv<Task> {
    Ok(Task {
        kind: TaskKind::from_name(&r.template).map_err(|e| e.to_string())?,
        object: object_index(v, &r.object)?,
        receptacle: receptacle_index(v, &r.receptacle)?,
    })
}

fn step_to_record(obs: &Observation, g: &SubGoal, v: &Vocabularies) -> StepRecord {
    StepRecord {
        height: obs.rgb.height,
        width: obs.rgb.width,
        rgb: obs.rgb.data.clone(),
        bbox_mask: obs.bbox_mask.data.clone(),
        action: g.action.name().into(),
        object: v.object_name(g.object).into(),
        receptacle: v.receptacle_name(g.receptacle).into(),
        outcome: None,
        injected: None,
    }
}

fn step_from_record(r: &StepRecord, v: &Vocabularies) -> Conv<(Observation, SubGoal)> {
    let observation = Observation {
        rgb: RgbImage {
            height: r.height,
            width: r.width,
            data: r.rgb.clone(),
        },
        bbox_mask: ClassMask {
            height: r.height,
            width: r.width,
            data: r.bbox_mask.clone(),
        },
    };
    observation
        .validate(v.num_object_classes())
        .map_err(|e| e.to_string())?;
    let action: Action = r.action.parse().map_err(|e: hapfi_core::Error| e.to_string())?;
    let g = SubGoal::new(action, object_index(v, &r.object)?, receptacle_index(v, &r.receptacle)?);
    Ok((observation, g))
}

fn episode_to_record(e: &Episode, v: &Vocabularies) -> EpisodeRecord {
    EpisodeRecord {
        version: FORMAT_VERSION,
        id: e.id,
        instruction: e.instruction.clone(),
        scene_id: e.scene_id,
        split: e.split.name().into(),
        task: task_to_record(&e.task, v),
        agent_start: [e.agent_start.0, e.agent_start.1],
        steps: e
            .steps
            .iter()
            .map(|s| step_to_record(&s.observation, &s.subgoal, v))
            .collect(),
    }
}

fn episode_from_record(r: EpisodeRecord, v: &Vocabularies) -> Conv<Episode> {
    check_version(r.version)?;
    let mut steps = Vec::with_capacity(r.steps.len());
    for (k, s) in r.steps.iter().enumerate() {
        if s.outcome.is_some() || s.injected.is_some() {
            return Err(format!("step {k}: episode steps carry no outcome"));
        }
        let (observation, subgoal) = step_from_record(s, v).map_err(|e| format!("step {k}: {e}"))?;
        steps.push(Step { observation, subgoal });
    }
    Ok(Episode {
        id: r.id,
        instruction: r.instruction,
        scene_id: r.scene_id,
        split: Split::from_name(&r.split).map_err(|e| e.to_string())?,
        task: task_from_record(&r.task, v)?,
        agent_start: (r.agent_start[0], r.agent_start[1]),
        steps,
    })
}

fn trajectory_to_record(t: &Trajectory, v: &Vocabularies) -> TrajectoryFileRecord {
    TrajectoryFileRecord {
        version: FORMAT_VERSION,
        instruction: t.instruction.clone(),
        scene_id: t.scene_id,
        task: task_to_record(&t.task, v),
        agent_start: [t.agent_start.0, t.agent_start.1],
        seed: t.seed,
        schedule: t.schedule.iter().map(ScheduledFailure::to_string).collect(),
        status: t.status.name().into(),
        steps: t
            .records
            .iter()
            .map(|r| StepRecord {
                outcome: Some(r.outcome.to_string()),
                injected: r.injected.map(|k| k.name().into()),
                ..step_to_record(&r.observation, &r.subgoal, v)
            })
            .collect(),
    }
}

fn trajectory_from_record(r: TrajectoryFileRecord, v: &Vocabularies) -> Conv<Trajectory> {
    check_version(r.version)?;
    let mut records = Vec::with_capacity(r.steps.len());
    for (k, s) in r.steps.iter().enumerate() {
        let (observation, subgoal) = step_from_record(s, v).map_err(|e| format!("step {k}: {e}"))?;
        let outcome = match s.outcome.as_deref() {
            Some("success") => Outcome::Success,
            Some("failed") => Outcome::Failed,
            other => return Err(format!("step {k}: bad outcome {other:?}")),
        };
        let injected = s
            .injected
            .as_deref()
            .map(FailureKind::from_name)
            .transpose()
            .map_err(|e| format!("step {k}: {e}"))?;
        records.push(TrajectoryRecord {
            observation,
            subgoal,
            outcome,
            injected,
        });
    }
    Ok(Trajectory {
        scene_id: r.scene_id,
        instruction: r.instruction,
        task: task_from_record(&r.task, v)?,
        agent_start: (r.agent_start[0], r.agent_start[1]),
        seed: r.seed,
        schedule: r
            .schedule
            .iter()
            .map(|s| ScheduledFailure::parse(s))
            .collect::<hapfi_core::Result<_>>()
            .map_err(|e| e.to_string())?,
        records,
        status: TerminalStatus::from_name(&r.status).map_err(|e| e.to_string())?,
    })
}

fn scene_to_record(s: &Scene, v: &Vocabularies) -> SceneRecord {
    SceneRecord {
        version: FORMAT_VERSION,
        id: s.id,
        width: s.width,
        height: s.height,
        cell_size: s.cell_size,
        floor: s.floor,
        agent_start: [s.agent_start.0, s.agent_start.1],
        items: s
            .items
            .iter()
            .map(|p| ItemRecord {
                class: v.object_name(p.class).into(),
                cell: [p.cell.0, p.cell.1],
            })
            .collect(),
        palette: s.palette.clone(),
    }
}

fn scene_from_record(r: SceneRecord, v: &Vocabularies) -> Conv<Scene> {
    check_version(r.version)?;
    let items = r
        .items
        .iter()
        .map(|it| {
            Ok(Placement {
                class: object_index(v, &it.class)?,
                cell: (it.cell[0], it.cell[1]),
            })
        })
        .collect::<Conv<Vec<_>>>()?;
    let scene = Scene {
        id: r.id,
        width: r.width,
        height: r.height,
        cell_size: r.cell_size,
        items,
        palette: r.palette,
        floor: r.floor,
        agent_start: (r.agent_start[0], r.agent_start[1]),
    };
    scene.validate().map_err(|e| e.to_string())?;
    Ok(scene)
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(&r).map_err(|e| HapfiError::Data(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| HapfiError::io(path, e))
}

/// Parses every non-blank line; errors name the 1-based line number.
fn read_lines<T: DeserializeOwned, U>(path: &Path, mut convert: impl FnMut(T) -> Conv<U>) -> Result<Vec<U>> {
    let text = fs::read_to_string(path).map_err(|e| HapfiError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| HapfiError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: T = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        out.push(convert(rec).map_err(parse_err)?);
    }
    Ok(out)
}

pub fn write_episodes(path: &Path, episodes: &[Episode], v: &Vocabularies) -> Result<()> {
    write_lines(path, episodes.iter().map(|e| episode_to_record(e, v)))
}

pub fn read_episodes(path: &Path, v: &Vocabularies) -> Result<Vec<Episode>> {
    read_lines(path, |r| episode_from_record(r, v))
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory], v: &Vocabularies) -> Result<()> {
    write_lines(path, trajectories.iter().map(|t| trajectory_to_record(t, v)))
}

pub fn read_trajectories(path: &Path, v: &Vocabularies) -> Result<Vec<Trajectory>> {
    read_lines(path, |r| trajectory_from_record(r, v))
}

pub fn write_scenes(path: &Path, scenes: &[Scene], v: &Vocabularies) -> Result<()> {
    write_lines(path, scenes.iter().map(|s| scene_to_record(s, v)))
}

pub fn read_scenes(path: &Path, v: &Vocabularies) -> Result<Vec<Scene>> {
    read_lines(path, |r| scene_from_record(r, v))
}

pub fn write_vocab(path: &Path, vocab: &TokenVocab) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| HapfiError::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<TokenVocab> {
    let text = fs::read_to_string(path).map_err(|e| HapfiError::io(path, e))?;
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Ok(TokenVocab::from_tokens(tokens)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    version: u32,
    seed: u64,
    #[serde(flatten)]
    config: CorpusConfig,
}

/// Writes `scenes.jsonl`, `episodes.jsonl`, `vocab.txt` and `corpus.toml`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, tokens: &TokenVocab, v: &Vocabularies) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HapfiError::io(dir, e))?;
    write_scenes(&dir.join(SCENES_FILE), &corpus.scenes, v)?;
    write_episodes(&dir.join(EPISODES_FILE), &corpus.episodes, v)?;
    write_vocab(&dir.join(VOCAB_FILE), tokens)?;
    let meta = CorpusFile {
        version: FORMAT_VERSION,
        seed: corpus.seed,
        config: corpus.config.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| HapfiError::Data(e.to_string()))?;
    let path = dir.join(CORPUS_CONFIG_FILE);
    fs::write(&path, text).map_err(|e| HapfiError::io(path, e))
}

pub struct CorpusFiles {
    pub corpus: Corpus,
    pub tokens: TokenVocab,
}

pub fn read_corpus(dir: &Path, v: &Vocabularies) -> Result<CorpusFiles> {
    let meta_path: PathBuf = dir.join(CORPUS_CONFIG_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| HapfiError::io(&meta_path, e))?;
    let meta: CorpusFile = toml::from_str(&text).map_err(|e| HapfiError::Parse {
        path: meta_path.clone(),
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })?;
    if meta.version != FORMAT_VERSION {
        return Err(HapfiError::Data(format!("{}: unsupported version {}", meta_path.display(), meta.version)));
    }
    let corpus = Corpus {
        config: meta.config,
        seed: meta.seed,
        scenes: read_scenes(&dir.join(SCENES_FILE), v)?,
        episodes: read_episodes(&dir.join(EPISODES_FILE), v)?,
    };
    corpus.validate()?;
    Ok(CorpusFiles {
        corpus,
        tokens: read_vocab(&dir.join(VOCAB_FILE))?,
    })
}

/// Object-vocabulary index of a receptacle name, for convenience in tools.
pub fn receptacle_as_object(v: &Vocabularies, name: &str) -> Result<usize> {
    Ok(receptacle_object(v.receptacle(name)?))
}
