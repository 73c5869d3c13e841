//! Synthetic generic-visual-grounding videos.
//!
//! Each video contains a handful of moving objects with discrete appearance
//! attributes and an action program. One referring expression per video
//! picks out one of three case families: a single target in one segment, a
//! single target split by an occlusion gap, or several look-alike targets
//! doing the same action. Every case ships with spatial distractors (same
//! look, other action) and temporal distractors (same action, other look).

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DstgError, Result};
use crate::geometry::{box_iou, BBox};

pub const DATASET_SCHEMA: &str = "gvg-synth/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Person,
    Animal,
    Vehicle,
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    White,
    Black,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Plain,
    Striped,
    Dotted,
    Checkered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Walk,
    Run,
    Dance,
    Wave,
    Stand,
    Spin,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Person, Category::Animal, Category::Vehicle, Category::Shape];
    pub fn word(self) -> &'static str {
        match self {
            Category::Person => "person",
            Category::Animal => "animal",
            Category::Vehicle => "vehicle",
            Category::Shape => "shape",
        }
    }
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::White,
        Color::Black,
    ];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::White => "white",
            Color::Black => "black",
        }
    }
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];
    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
    /// Box side in pixels.
    pub fn side(self) -> f64 {
        match self {
            SizeClass::Small => 16.0,
            SizeClass::Medium => 32.0,
            SizeClass::Large => 48.0,
        }
    }
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Plain, Texture::Striped, Texture::Dotted, Texture::Checkered];
    pub fn word(self) -> &'static str {
        match self {
            Texture::Plain => "plain",
            Texture::Striped => "striped",
            Texture::Dotted => "dotted",
            Texture::Checkered => "checkered",
        }
    }
}

impl Action {
    pub const ALL: [Action; 6] = [Action::Walk, Action::Run, Action::Dance, Action::Wave, Action::Stand, Action::Spin];
    pub fn gerund(self) -> &'static str {
        match self {
            Action::Walk => "walking",
            Action::Run => "running",
            Action::Dance => "dancing",
            Action::Wave => "waving",
            Action::Stand => "standing",
            Action::Spin => "spinning",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Appearance {
    pub color: Color,
    pub size: SizeClass,
    pub texture: Texture,
}

impl Appearance {
    /// Number of equal attributes among color, size and texture.
    pub fn shared_with(&self, other: &Appearance) -> usize {
        usize::from(self.color == other.color)
            + usize::from(self.size == other.size)
            + usize::from(self.texture == other.texture)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Linear,
    Sinusoidal,
    Circular,
}

/// Parametric per-frame displacement. `speed` is the drift in px/frame
/// along `heading`; `amplitude`/`period` shape the oscillating component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub path: PathKind,
    pub speed: f64,
    pub heading: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl Trajectory {
    pub fn stationary() -> Self {
        Self { path: PathKind::Linear, speed: 0.0, heading: 0.0, amplitude: 0.0, period: 1.0, phase: 0.0 }
    }

    /// Displacement applied between local frame `tau` and `tau + 1`.
    pub fn displacement(&self, tau: usize) -> (f64, f64) {
        let (hx, hy) = (self.heading.cos(), self.heading.sin());
        let drift = (self.speed * hx, self.speed * hy);
        let w = std::f64::consts::TAU / self.period;
        let pos = |t: f64| -> (f64, f64) {
            match self.path {
                PathKind::Linear => (0.0, 0.0),
                PathKind::Sinusoidal => {
                    let s = self.amplitude * (w * t + self.phase).sin();
                    (-hy * s, hx * s)
                }
                PathKind::Circular => {
                    (self.amplitude * (w * t + self.phase).cos(), self.amplitude * (w * t + self.phase).sin())
                }
            }
        };
        let (a, b) = (pos(tau as f64), pos(tau as f64 + 1.0));
        (drift.0 + b.0 - a.0, drift.1 + b.1 - a.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub action: Action,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: u32,
    pub category: Category,
    pub appearance: Appearance,
    /// Center at frame 0 (or at first appearance).
    pub origin: [f64; 2],
    pub motion_program: Vec<MotionSegment>,
}

impl SceneObject {
    pub fn action_at(&self, frame: usize) -> Option<Action> {
        self.motion_program.iter().find(|s| s.start_frame <= frame && frame < s.end_frame).map(|s| s.action)
    }

    pub fn visible_at(&self, frame: usize) -> bool {
        self.action_at(frame).is_some()
    }

    /// Per-frame boxes; `None` where the object is absent. Positions are
    /// integrated from the motion program and reflected at the frame border.
    pub fn track(&self, num_frames: usize, width: f64, height: f64) -> Vec<Option<BBox>> {
        let side = self.appearance.size.side();
        let half = side / 2.0;
        let (mut x, mut y) = (self.origin[0], self.origin[1]);
        let (mut sx, mut sy) = (1.0, 1.0);
        let mut out = Vec::with_capacity(num_frames);
        for f in 0..num_frames {
            let seg = self.motion_program.iter().find(|s| s.start_frame <= f && f < s.end_frame);
            match seg {
                Some(_) => out.push(Some(BBox::from_center(x, y, side, side))),
                None => out.push(None),
            }
            // frozen while occluded
            if let Some(s) = seg {
                if self.visible_at(f + 1) {
                    let (dx, dy) = s.trajectory.displacement(f - s.start_frame);
                    x += sx * dx;
                    y += sy * dy;
                    if x < half {
                        x = 2.0 * half - x;
                        sx = -sx;
                    } else if x > width - half {
                        x = 2.0 * (width - half) - x;
                        sx = -sx;
                    }
                    if y < half {
                        y = 2.0 * half - y;
                        sy = -sy;
                    } else if y > height - half {
                        y = 2.0 * (height - half) - y;
                        sy = -sy;
                    }
                    x = x.clamp(half, width - half);
                    y = y.clamp(half, height - half);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    GroundTruth,
    Jittered,
    Background,
}

/// One detected box in one frame. Features are derived later by
/// [`crate::featurize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_idx: usize,
    pub frame_idx: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub source: RegionSource,
    /// Object the region was drawn from; `None` for background clutter.
    pub object_id: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    SingleTargetSingleSegment,
    SingleTargetDiscontinuous,
    MultiTarget,
}

impl CaseKind {
    pub const ALL: [CaseKind; 3] =
        [CaseKind::SingleTargetSingleSegment, CaseKind::SingleTargetDiscontinuous, CaseKind::MultiTarget];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorLabel {
    SpatialDistractor,
    TemporalDistractor,
    Neutral,
}

/// Ground-truth tube: sorted `[frame_idx, region_idx]` pairs of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTube {
    pub object_id: u32,
    pub entries: Vec<[usize; 2]>,
}

impl GtTube {
    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e[0]).collect()
    }

    /// Maximal runs of consecutive frames as half-open intervals.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        frame_runs(&self.frames())
    }
}

/// Maximal runs of consecutive integers in a sorted list, as `[start, end)`.
pub fn frame_runs(frames: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &f in frames {
        match out.last_mut() {
            Some((_, end)) if *end == f => *end = f + 1,
            _ => out.push((f, f + 1)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferringCase {
    pub expression: Vec<String>,
    pub case_kind: CaseKind,
    pub target_action: Action,
    pub target_tubes: Vec<GtTube>,
    /// region_idx -> label, for regions of non-target objects and of target
    /// objects outside their tube.
    pub distractor_labels: BTreeMap<usize, DistractorLabel>,
}

impl ReferringCase {
    pub fn target_object_ids(&self) -> Vec<u32> {
        self.target_tubes.iter().map(|t| t.object_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub schema: String,
    pub video_id: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub num_frames: usize,
    pub fps: f64,
    pub objects: Vec<SceneObject>,
    /// Per-frame region lists; `regions[f][k].frame_idx == f`.
    pub regions: Vec<Vec<Region>>,
    pub expressions: Vec<ReferringCase>,
}

impl VideoSample {
    pub fn num_regions(&self) -> usize {
        self.regions.iter().map(Vec::len).sum()
    }

    /// All regions in region_idx order.
    pub fn flat_regions(&self) -> Vec<&Region> {
        let mut v: Vec<&Region> = self.regions.iter().flatten().collect();
        v.sort_by_key(|r| r.region_idx);
        v
    }

    pub fn region(&self, region_idx: usize) -> Option<&Region> {
        self.regions.iter().flatten().find(|r| r.region_idx == region_idx)
    }

    pub fn object(&self, object_id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn tracks(&self) -> BTreeMap<u32, Vec<Option<BBox>>> {
        self.objects
            .iter()
            .map(|o| (o.object_id, o.track(self.num_frames, self.width as f64, self.height as f64)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_frames: usize,
    pub num_objects: usize,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    /// Probability that a ground-truth box gets a jittered duplicate.
    pub duplicate_prob: f64,
    /// Relative center/size jitter of duplicates.
    pub jitter: f64,
    pub background_per_frame: usize,
    pub node_budget: usize,
    pub max_per_category: usize,
    pub case_kind: Option<CaseKind>,
    pub target_action: Option<Action>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_frames: 24,
            num_objects: 4,
            width: 256,
            height: 256,
            fps: 6.0,
            duplicate_prob: 0.5,
            jitter: 0.15,
            background_per_frame: 2,
            node_budget: 256,
            max_per_category: 4,
            case_kind: None,
            target_action: None,
        }
    }
}

impl GeneratorConfig {
    /// Worst-case number of regions a video can produce.
    pub fn max_regions(&self) -> usize {
        let per_object = if self.duplicate_prob > 0.0 { 2 } else { 1 };
        self.num_frames * (self.num_objects * per_object + self.background_per_frame)
    }

    pub fn validate(&self) -> Result<()> {
        if !(16..=64).contains(&self.num_frames) {
            return Err(DstgError::Config(format!("num_frames {} not in [16, 64]", self.num_frames)));
        }
        if !(2..=8).contains(&self.num_objects) {
            return Err(DstgError::Config(format!("num_objects {} not in [2, 8]", self.num_objects)));
        }
        if self.width < 64 || self.height < 64 {
            return Err(DstgError::Config("canvas must be at least 64x64".into()));
        }
        if !(0.0..=1.0).contains(&self.duplicate_prob) || !(0.0..0.5).contains(&self.jitter) {
            return Err(DstgError::Config("duplicate_prob in [0,1], jitter in [0,0.5)".into()));
        }
        if self.max_per_category < 2 {
            return Err(DstgError::Config("max_per_category must be >= 2".into()));
        }
        if self.case_kind == Some(CaseKind::MultiTarget) && self.num_objects < 3 {
            return Err(DstgError::Config("multi_target cases need at least 3 objects".into()));
        }
        let needed = self.max_regions();
        if needed > self.node_budget {
            return Err(DstgError::NodeBudget { needed, budget: self.node_budget });
        }
        Ok(())
    }
}

fn random_appearance(rng: &mut impl Rng) -> Appearance {
    Appearance {
        color: *Color::ALL.choose(rng).unwrap(),
        size: *SizeClass::ALL.choose(rng).unwrap(),
        texture: *Texture::ALL.choose(rng).unwrap(),
    }
}

/// Change exactly `k` of the three appearance attributes.
fn perturb_appearance(base: &Appearance, k: usize, rng: &mut impl Rng) -> Appearance {
    let mut which = [0usize, 1, 2];
    which.shuffle(rng);
    let mut out = *base;
    for &w in which.iter().take(k) {
        match w {
            0 => {
                out.color =
                    *Color::ALL.iter().filter(|&&c| c != base.color).collect::<Vec<_>>().choose(rng).unwrap().to_owned()
            }
            1 => {
                out.size = *SizeClass::ALL
                    .iter()
                    .filter(|&&c| c != base.size)
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .unwrap()
                    .to_owned()
            }
            _ => {
                out.texture = *Texture::ALL
                    .iter()
                    .filter(|&&c| c != base.texture)
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .unwrap()
                    .to_owned()
            }
        }
    }
    out
}

fn trajectory_for(action: Action, rng: &mut impl Rng) -> Trajectory {
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    match action {
        Action::Walk => Trajectory {
            path: PathKind::Linear,
            speed: rng.random_range(1.0..2.0),
            heading,
            amplitude: 0.0,
            period: 1.0,
            phase,
        },
        Action::Run => Trajectory {
            path: PathKind::Linear,
            speed: rng.random_range(3.5..5.5),
            heading,
            amplitude: 0.0,
            period: 1.0,
            phase,
        },
        Action::Dance => Trajectory {
            path: PathKind::Sinusoidal,
            speed: rng.random_range(0.0..0.5),
            heading,
            amplitude: rng.random_range(5.0..8.0),
            period: 6.0,
            phase,
        },
        Action::Wave => Trajectory {
            path: PathKind::Sinusoidal,
            speed: 0.0,
            heading: std::f64::consts::FRAC_PI_2 * if rng.random_bool(0.5) { 0.0 } else { 1.0 },
            amplitude: rng.random_range(1.5..2.5),
            period: 3.0,
            phase,
        },
        Action::Stand => Trajectory::stationary(),
        Action::Spin => Trajectory {
            path: PathKind::Circular,
            speed: 0.0,
            heading,
            amplitude: rng.random_range(3.0..5.0),
            period: 8.0,
            phase,
        },
    }
}

fn other_action(exclude: Action, rng: &mut impl Rng) -> Action {
    let pool: Vec<Action> = Action::ALL.iter().copied().filter(|&a| a != exclude).collect();
    *pool.choose(rng).unwrap()
}

/// Visible intervals with their actions, before trajectories are attached.
type Plan = Vec<(Action, usize, usize)>;

fn build_program(plan: &Plan, rng: &mut impl Rng) -> Vec<MotionSegment> {
    plan.iter()
        .filter(|(_, s, e)| s < e)
        .map(|&(action, start_frame, end_frame)| MotionSegment {
            action,
            start_frame,
            end_frame,
            trajectory: trajectory_for(action, rng),
        })
        .collect()
}

/// Fill `[0, t)` outside the `active` intervals with actions other than
/// `target`, one action per gap.
fn plan_around(
    active: &[(usize, usize)],
    absent: &[(usize, usize)],
    t: usize,
    target: Action,
    rng: &mut impl Rng,
) -> Plan {
    let mut marks = vec![0u8; t]; // 0 filler, 1 target action, 2 absent
    for &(s, e) in active {
        marks[s..e].iter_mut().for_each(|m| *m = 1);
    }
    for &(s, e) in absent {
        marks[s..e].iter_mut().for_each(|m| *m = 2);
    }
    let mut plan = Plan::new();
    let mut f = 0;
    while f < t {
        let m = marks[f];
        let mut e = f;
        while e < t && marks[e] == m {
            e += 1;
        }
        match m {
            1 => plan.push((target, f, e)),
            0 => plan.push((other_action(target, rng), f, e)),
            _ => {}
        }
        f = e;
    }
    plan
}

/// Filler program that never performs `forbidden`.
fn plan_without(forbidden: Action, t: usize, rng: &mut impl Rng) -> Plan {
    let cut = rng.random_range(t / 3..=2 * t / 3);
    let a = other_action(forbidden, rng);
    let mut b = other_action(forbidden, rng);
    if b == a {
        b = other_action(forbidden, rng);
    }
    vec![(a, 0, cut), (b, cut, t)]
}

fn random_interval(t: usize, min_len: usize, max_len: usize, rng: &mut impl Rng) -> (usize, usize) {
    let len = rng.random_range(min_len..=max_len.min(t));
    let s = rng.random_range(0..=t - len);
    (s, s + len)
}

fn random_origin(side: f64, width: f64, height: f64, rng: &mut impl Rng) -> [f64; 2] {
    let h = side / 2.0;
    [rng.random_range(h..width - h), rng.random_range(h..height - h)]
}

/// Pick case kinds that fit the object count.
fn feasible_kinds(cfg: &GeneratorConfig) -> Vec<CaseKind> {
    match cfg.case_kind {
        Some(k) => vec![k],
        None if cfg.num_objects >= 3 => CaseKind::ALL.to_vec(),
        None => vec![CaseKind::SingleTargetSingleSegment, CaseKind::SingleTargetDiscontinuous],
    }
}

struct ObjectDraft {
    category: Category,
    appearance: Appearance,
    plan: Plan,
}

/// Deterministic video generator: a pure function of `(config, seed)`.
pub fn generate_video(cfg: &GeneratorConfig, seed: u64) -> Result<VideoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.num_frames;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let kind = *feasible_kinds(cfg).choose(&mut rng).unwrap();
    let action = cfg.target_action.unwrap_or_else(|| *Action::ALL.choose(&mut rng).unwrap());
    let category = *Category::ALL.choose(&mut rng).unwrap();
    let look = random_appearance(&mut rng);

    let mut drafts: Vec<ObjectDraft> = Vec::new();
    let n_targets = match kind {
        CaseKind::MultiTarget => {
            if cfg.num_objects >= 5 && rng.random_bool(0.3) {
                3
            } else {
                2
            }
        }
        _ => 1,
    };
    for _ in 0..n_targets {
        let plan = match kind {
            CaseKind::SingleTargetSingleSegment => {
                let seg = random_interval(t, (t / 3).max(4), (2 * t) / 3, &mut rng);
                plan_around(&[seg], &[], t, action, &mut rng)
            }
            CaseKind::SingleTargetDiscontinuous => {
                let gap = rng.random_range(3..=8usize.min(t - 8));
                let room = t - gap;
                let len1 = rng.random_range(4..=(room / 2).max(4));
                let len2 = rng.random_range(4..=(room - len1).max(4));
                let slack = t - gap - len1 - len2;
                let s1 = rng.random_range(0..=slack);
                let g0 = s1 + len1;
                let g1 = g0 + gap;
                plan_around(&[(s1, g0), (g1, g1 + len2)], &[(g0, g1)], t, action, &mut rng)
            }
            CaseKind::MultiTarget => {
                let seg = random_interval(t, (t / 3).max(4), (3 * t) / 4, &mut rng);
                plan_around(&[seg], &[], t, action, &mut rng)
            }
        };
        let appearance = match kind {
            // look-alikes: identical color and texture, free size
            CaseKind::MultiTarget => Appearance { size: *SizeClass::ALL.choose(&mut rng).unwrap(), ..look },
            _ => look,
        };
        drafts.push(ObjectDraft { category, appearance, plan });
    }
    let targets: Vec<Appearance> = drafts.iter().map(|s| s.appearance).collect();

    let n_rest = cfg.num_objects - n_targets;
    let first_is_spatial = n_rest >= 2 || rng.random_bool(0.5);
    for k in 0..n_rest {
        let role = match (k, first_is_spatial) {
            (0, true) | (1, false) => 0, // spatial distractor
            (0, false) | (1, true) => 1, // temporal distractor
            _ => 2,
        };
        let draft = match role {
            0 => {
                let changes = rng.random_range(0..=1);
                let base = targets[rng.random_range(0..targets.len())];
                ObjectDraft {
                    category,
                    appearance: perturb_appearance(&base, changes, &mut rng),
                    plan: plan_without(action, t, &mut rng),
                }
            }
            1 => {
                let changes = rng.random_range(2..=3);
                let mut app = perturb_appearance(&targets[0], changes, &mut rng);
                while targets.iter().any(|a| a.shared_with(&app) > 1) {
                    app = perturb_appearance(&targets[0], 3, &mut rng);
                }
                let cat = *Category::ALL.choose(&mut rng).unwrap();
                let seg = random_interval(t, (t / 3).max(4), (2 * t) / 3, &mut rng);
                ObjectDraft { category: cat, appearance: app, plan: plan_around(&[seg], &[], t, action, &mut rng) }
            }
            _ => {
                let cat = *Category::ALL.choose(&mut rng).unwrap();
                let app = random_appearance(&mut rng);
                // look-alikes must never perform the target action
                let plan = if targets.iter().any(|a| a.shared_with(&app) >= 2) {
                    plan_without(action, t, &mut rng)
                } else {
                    let seg = random_interval(t, 4, t, &mut rng);
                    let act = *Action::ALL.choose(&mut rng).unwrap();
                    plan_around(&[seg], &[], t, act, &mut rng)
                };
                ObjectDraft { category: cat, appearance: app, plan }
            }
        };
        drafts.push(draft);
    }

    // cap same-category objects
    let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
    for s in drafts.iter_mut() {
        let c = counts.entry(s.category).or_default();
        if *c >= cfg.max_per_category {
            let free = Category::ALL
                .iter()
                .copied()
                .find(|k| counts.get(k).copied().unwrap_or(0) < cfg.max_per_category)
                .expect("at most 8 objects over 4 categories");
            s.category = free;
            *counts.entry(free).or_default() += 1;
        } else {
            *c += 1;
        }
    }

    let objects: Vec<SceneObject> = drafts
        .into_iter()
        .enumerate()
        .map(|(i, s)| SceneObject {
            object_id: i as u32,
            category: s.category,
            appearance: s.appearance,
            origin: random_origin(s.appearance.size.side(), w, h, &mut rng),
            motion_program: build_program(&s.plan, &mut rng),
        })
        .collect();

    // regions
    let tracks: Vec<Vec<Option<BBox>>> = objects.iter().map(|o| o.track(t, w, h)).collect();
    let mut regions: Vec<Vec<Region>> = Vec::with_capacity(t);
    let mut gt_region: BTreeMap<(u32, usize), usize> = BTreeMap::new();
    let mut next_idx = 0;
    for f in 0..t {
        let mut frame: Vec<(BBox, RegionSource, Option<u32>)> = Vec::new();
        for (o, track) in objects.iter().zip(&tracks) {
            let Some(b) = track[f] else { continue };
            frame.push((b, RegionSource::GroundTruth, Some(o.object_id)));
            if rng.random_bool(cfg.duplicate_prob) {
                frame.push((jitter_box(&b, cfg.jitter, w, h, &mut rng), RegionSource::Jittered, Some(o.object_id)));
            }
        }
        for _ in 0..cfg.background_per_frame {
            let side = rng.random_range(16.0..48.0);
            let c = random_origin(side, w, h, &mut rng);
            frame.push((BBox::from_center(c[0], c[1], side, side), RegionSource::Background, None));
        }
        frame.shuffle(&mut rng);
        let mut list = Vec::with_capacity(frame.len());
        for (bbox, source, object_id) in frame {
            if source == RegionSource::GroundTruth {
                gt_region.insert((object_id.unwrap(), f), next_idx);
            }
            list.push(Region { region_idx: next_idx, frame_idx: f, bbox, source, object_id });
            next_idx += 1;
        }
        regions.push(list);
    }

    let target_ids: Vec<u32> = (0..n_targets as u32).collect();
    let target_tubes: Vec<GtTube> = target_ids
        .iter()
        .map(|&id| {
            let obj = &objects[id as usize];
            let entries =
                (0..t).filter(|&f| obj.action_at(f) == Some(action)).map(|f| [f, gt_region[&(id, f)]]).collect();
            GtTube { object_id: id, entries }
        })
        .collect();

    let mut case = ReferringCase {
        expression: Vec::new(),
        case_kind: kind,
        target_action: action,
        target_tubes,
        distractor_labels: BTreeMap::new(),
    };
    case.distractor_labels = label_distractors(&case, &objects, &regions);
    case.expression = render_expression(&case, &objects, seed);

    Ok(VideoSample {
        schema: DATASET_SCHEMA.to_string(),
        video_id: format!("synth-{seed:08}"),
        seed,
        width: cfg.width,
        height: cfg.height,
        num_frames: t,
        fps: cfg.fps,
        objects,
        regions,
        expressions: vec![case],
    })
}

fn jitter_box(b: &BBox, jitter: f64, w: f64, h: f64, rng: &mut impl Rng) -> BBox {
    let (cx, cy) = b.center();
    for _ in 0..32 {
        let bw = b.width() * (1.0 + rng.random_range(-jitter..=jitter));
        let bh = b.height() * (1.0 + rng.random_range(-jitter..=jitter));
        let nx = cx + b.width() * rng.random_range(-jitter..=jitter);
        let ny = cy + b.height() * rng.random_range(-jitter..=jitter);
        let cand = BBox::from_center(nx, ny, bw, bh).clamp_into(w, h);
        if box_iou(&cand, b) >= 0.5 {
            return cand;
        }
    }
    *b
}

/// Region-level distractor labels from the attribute-overlap rule.
pub fn label_distractors(
    case: &ReferringCase,
    objects: &[SceneObject],
    regions: &[Vec<Region>],
) -> BTreeMap<usize, DistractorLabel> {
    let target_ids: HashSet<u32> = case.target_object_ids().into_iter().collect();
    let in_tube: HashSet<(u32, usize)> =
        case.target_tubes.iter().flat_map(|t| t.entries.iter().map(move |e| (t.object_id, e[0]))).collect();
    let target_looks: Vec<Appearance> =
        objects.iter().filter(|o| target_ids.contains(&o.object_id)).map(|o| o.appearance).collect();
    let mut out = BTreeMap::new();
    for r in regions.iter().flatten() {
        let Some(oid) = r.object_id else { continue };
        if in_tube.contains(&(oid, r.frame_idx)) {
            continue;
        }
        let obj = &objects[oid as usize];
        let act = obj.action_at(r.frame_idx);
        let label = classify_region(&obj.appearance, act, &target_looks, case.target_action);
        out.insert(r.region_idx, label);
    }
    out
}

fn classify_region(
    look: &Appearance,
    act: Option<Action>,
    targets: &[Appearance],
    target_action: Action,
) -> DistractorLabel {
    let similar = targets.iter().any(|t| t.shared_with(look) >= 2);
    let dissimilar = targets.iter().all(|t| t.shared_with(look) <= 1);
    match act {
        Some(a) if a != target_action && similar => DistractorLabel::SpatialDistractor,
        Some(a) if a == target_action && dissimilar => DistractorLabel::TemporalDistractor,
        _ => DistractorLabel::Neutral,
    }
}

const SINGLE_TEMPLATES: &[&str] = &[
    "the {size} {color} {texture} {cat} that is {act}",
    "{act} {size} {color} {texture} {cat}",
    "a {size} {color} {cat} with a {texture} pattern is {act} in the video",
    "find the {size} {cat} in {color} with {texture} texture which is {act} around",
    "in this untrimmed video please locate the {size} {color} {cat} wearing a {texture} pattern while it is {act} near the other objects",
];

const MULTI_TEMPLATES: &[&str] = &[
    "every {color} {texture} {cat} that is {act}",
    "all {color} {cat} with {texture} pattern {act} together",
    "each {texture} {color} {cat} {act} in the scene",
    "locate every {color} {cat} wearing a {texture} pattern while they are {act} at the same time",
];

/// Template sentence naming the shared appearance of the targets and their
/// action. A function of `(attributes, seed)` only.
pub fn render_expression(case: &ReferringCase, objects: &[SceneObject], seed: u64) -> Vec<String> {
    let ids = case.target_object_ids();
    let first = objects.iter().find(|o| Some(&o.object_id) == ids.first()).expect("case targets exist");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7e7);
    let multi = case.case_kind == CaseKind::MultiTarget;
    let template =
        if multi { MULTI_TEMPLATES.choose(&mut rng).unwrap() } else { SINGLE_TEMPLATES.choose(&mut rng).unwrap() };
    template
        .replace("{size}", first.appearance.size.word())
        .replace("{color}", first.appearance.color.word())
        .replace("{texture}", first.appearance.texture.word())
        .replace("{cat}", first.category.word())
        .replace("{act}", case.target_action.gerund())
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Check every dataset invariant; an empty list means the sample is sound.
pub fn validate_sample(s: &VideoSample) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut bad = |msg: String| v.push(Violation(msg));
    if s.width == 0 || s.height == 0 {
        bad("frame size must be positive".into());
    }
    if s.num_frames < 2 {
        bad(format!("num_frames {} < 2", s.num_frames));
    }
    if s.regions.len() != s.num_frames {
        bad(format!("{} region frames for {} frames", s.regions.len(), s.num_frames));
    }
    let mut ids = HashSet::new();
    for o in &s.objects {
        if !ids.insert(o.object_id) {
            bad(format!("duplicate object_id {}", o.object_id));
        }
        let mut last_end = 0;
        for seg in &o.motion_program {
            if !(seg.start_frame < seg.end_frame && seg.end_frame <= s.num_frames) {
                bad(format!("object {} segment [{}, {}) out of range", o.object_id, seg.start_frame, seg.end_frame));
            }
            if seg.start_frame < last_end {
                bad(format!("object {} segments overlap or unsorted", o.object_id));
            }
            last_end = seg.end_frame;
        }
    }
    let mut index: BTreeMap<usize, &Region> = BTreeMap::new();
    for (f, frame) in s.regions.iter().enumerate() {
        for r in frame {
            if r.frame_idx != f {
                bad(format!("region {} filed under frame {f} but says {}", r.region_idx, r.frame_idx));
            }
            if !r.bbox.is_valid() || !r.bbox.within(s.width as f64, s.height as f64) {
                bad(format!("region {} has invalid box", r.region_idx));
            }
            if let Some(oid) = r.object_id {
                if !ids.contains(&oid) {
                    bad(format!("region {} references unknown object {oid}", r.region_idx));
                }
            }
            if index.insert(r.region_idx, r).is_some() {
                bad(format!("duplicate region_idx {}", r.region_idx));
            }
        }
    }
    for (ci, case) in s.expressions.iter().enumerate() {
        if case.expression.is_empty() {
            bad(format!("case {ci}: empty expression"));
        }
        for tube in &case.target_tubes {
            let mut prev: Option<usize> = None;
            for e in &tube.entries {
                let [f, ri] = *e;
                match index.get(&ri) {
                    Some(r) if r.frame_idx == f => {}
                    _ => bad(format!("case {ci}: tube entry [{f}, {ri}] references a missing region")),
                }
                if prev.is_some_and(|p| p >= f) {
                    bad(format!("case {ci}: tube entries not strictly sorted by frame"));
                }
                prev = Some(f);
            }
            if tube.entries.is_empty() {
                bad(format!("case {ci}: empty target tube"));
            }
        }
        match case.case_kind {
            CaseKind::MultiTarget if case.target_tubes.len() < 2 => {
                bad(format!("case {ci}: multi_target with {} tubes", case.target_tubes.len()))
            }
            CaseKind::SingleTargetDiscontinuous if !case.target_tubes.iter().any(|t| t.segments().len() >= 2) => {
                bad(format!("case {ci}: discontinuous case without a split tube"))
            }
            _ => {}
        }
        let targets: Vec<Appearance> =
            case.target_tubes.iter().filter_map(|t| s.object(t.object_id).map(|o| o.appearance)).collect();
        for (&ri, &label) in &case.distractor_labels {
            let Some(r) = index.get(&ri) else {
                bad(format!("case {ci}: label for missing region {ri}"));
                continue;
            };
            let Some(obj) = r.object_id.and_then(|o| s.object(o)) else {
                bad(format!("case {ci}: label on background region {ri}"));
                continue;
            };
            let act = obj.action_at(r.frame_idx);
            match label {
                DistractorLabel::SpatialDistractor => {
                    if !targets.iter().any(|t| t.shared_with(&obj.appearance) >= 2) {
                        bad(format!("case {ci}: spatial distractor {ri} shares < 2 appearance attributes"));
                    }
                    if act == Some(case.target_action) {
                        bad(format!("case {ci}: spatial distractor {ri} shares the target action"));
                    }
                }
                DistractorLabel::TemporalDistractor => {
                    if act != Some(case.target_action) {
                        bad(format!("case {ci}: temporal distractor {ri} does not share the action"));
                    }
                    if !targets.iter().all(|t| t.shared_with(&obj.appearance) <= 1) {
                        bad(format!("case {ci}: temporal distractor {ri} differs in < 2 appearance attributes"));
                    }
                }
                DistractorLabel::Neutral => {}
            }
        }
        let has_distractor = case
            .distractor_labels
            .values()
            .any(|l| matches!(l, DistractorLabel::SpatialDistractor | DistractorLabel::TemporalDistractor));
        if !has_distractor {
            bad(format!("case {ci}: no distractor"));
        }
    }
    v
}

/// JSON lines, optionally headed by a `{"manifest": …}` line.
pub fn write_dataset(path: &Path, manifest: Option<&serde_json::Value>, samples: &[VideoSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    if let Some(m) = manifest {
        serde_json::to_writer(&mut w, &serde_json::json!({ "manifest": m }))?;
        w.write_all(b"\n")?;
    }
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<VideoSample>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)?;
        // manifest lines carry no schema field
        if value.get("manifest").is_some() {
            continue;
        }
        let s: VideoSample = serde_json::from_value(value)?;
        if s.schema != DATASET_SCHEMA {
            return Err(DstgError::Format(format!("line {}: unsupported schema {:?}", i + 1, s.schema)));
        }
        out.push(s);
    }
    Ok(out)
}

/// Generate `k` videos with seeds derived from `seed`.
pub fn generate_dataset(cfg: &GeneratorConfig, k: usize, seed: u64) -> Result<Vec<VideoSample>> {
    (0..k).map(|i| generate_video(cfg, video_seed(seed, i))).collect()
}

pub fn video_seed(master: u64, i: usize) -> u64 {
    master.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64).rotate_left(17) ^ 0xd1b5_4a32_d192_ed03
}
