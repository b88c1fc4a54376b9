//! Procedural source/target domain datasets: grid-world scenes with a
//! moving actor, rendered under controllable domain shifts (view, modality,
//! task) with paired source/target samples sharing scene content.

use serde::{Deserialize, Serialize};

use crate::encoder::Video;
use crate::vocab::Vocab;

#[derive(Debug, Clone, thiserror::Error)]
pub enum DataError {
    #[error("benchmark needs at least {min} samples, got {n}")]
    TooSmall { n: usize, min: usize },
    #[error("dataset io: {0}")]
    Io(String),
    #[error("dataset format: {0}")]
    Format(String),
}

pub const MIN_BENCHMARK_SAMPLES: usize = 20;

/// Object colors: name and RGB. Luminances are pairwise distinct so the
/// pseudo-depth collapse keeps color questions answerable.
pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("blue", [0.10, 0.10, 0.95]),
    ("red", [0.95, 0.10, 0.10]),
    ("green", [0.10, 0.95, 0.10]),
    ("gold", [0.95, 0.85, 0.10]),
    ("cyan", [0.10, 0.95, 0.95]),
    ("magenta", [0.95, 0.10, 0.95]),
];

/// Actors draw their color from the first four entries of [`COLORS`],
/// giving every color question a 4-way answer space.
pub const ACTOR_COLORS: usize = 4;

pub const SHAPES: [&str; 4] = ["square", "triangle", "circle", "ring"];

const BACKGROUND: f64 = 0.05;

/// Static objects render dimmed so the moving actor dominates pooled
/// region features; shape identity survives via the pixel pattern.
const OBJECT_DIM: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Triangle,
    Circle,
    Ring,
}

impl ShapeKind {
    pub fn from_index(i: usize) -> ShapeKind {
        match i {
            0 => ShapeKind::Square,
            1 => ShapeKind::Triangle,
            2 => ShapeKind::Circle,
            _ => ShapeKind::Ring,
        }
    }

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }

    /// Pixel pattern of the shape within a `cell_px x cell_px` cell.
    fn covers(self, dy: usize, dx: usize, cell_px: usize) -> bool {
        let last = cell_px - 1;
        match self {
            ShapeKind::Square => true,
            ShapeKind::Triangle => dy >= dx,
            ShapeKind::Circle => {
                let cy = 2 * dy as i64 - last as i64;
                let cx = 2 * dx as i64 - last as i64;
                cy.abs() + cx.abs() <= last as i64
            }
            ShapeKind::Ring => dy == 0 || dx == 0 || dy == last || dx == last,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: usize,
    pub cell: (usize, usize),
}

/// Deterministically renderable scene: static colored shapes plus one
/// actor trajectory ending in a corner cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: usize,
    pub cell_px: usize,
    pub objects: Vec<SceneObject>,
    pub actor_color: usize,
    /// One cell per frame; the last entry is a corner.
    pub trajectory: Vec<(usize, usize)>,
    /// Index into `objects` of the single object lying on the trajectory.
    pub touched: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainTransform {
    /// Source rendering.
    Identity,
    /// Actor-centered crop, upscaled to full resolution.
    ViewShift,
    /// Luminance-to-pseudo-depth channel collapse.
    ModalityShift,
    /// Same rendering; answers become discretized coordinates.
    TaskShift,
}

impl DomainTransform {
    pub fn name(self) -> &'static str {
        match self {
            DomainTransform::Identity => "identity",
            DomainTransform::ViewShift => "view-shift",
            DomainTransform::ModalityShift => "modality-shift",
            DomainTransform::TaskShift => "task-shift",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionFamily {
    /// "What color is the moving object?"
    ActorColor,
    /// "Which cell does the actor end in?"
    EndCell,
    /// "Which object does the actor touch?"
    TouchedShape,
    /// Task-shift family: pick/place coordinates of the trajectory.
    PickPlace,
}

impl QuestionFamily {
    pub fn name(self) -> &'static str {
        match self {
            QuestionFamily::ActorColor => "actor-color",
            QuestionFamily::EndCell => "end-cell",
            QuestionFamily::TouchedShape => "touched-shape",
            QuestionFamily::PickPlace => "pick-place",
        }
    }

    pub fn question_words(self) -> Vec<&'static str> {
        match self {
            QuestionFamily::ActorColor => vec!["color", "?"],
            QuestionFamily::EndCell => vec!["end", "?"],
            QuestionFamily::TouchedShape => vec!["touch", "?"],
            QuestionFamily::PickPlace => vec!["pick", "place", "?"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub video: Video,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub domain: String,
    pub family: QuestionFamily,
    pub pair_id: u64,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub family: QuestionFamily,
    pub transform: DomainTransform,
    pub samples: Vec<QASample>,
}

impl Benchmark {
    pub fn train(&self) -> impl Iterator<Item = &QASample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn eval(&self) -> impl Iterator<Item = &QASample> {
        self.samples.iter().filter(|s| s.split == Split::Eval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub grid: usize,
    pub cell_px: usize,
    pub frames: usize,
    /// Total samples per domain; 4/5 train, 1/5 eval.
    pub samples_per_domain: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid: 4,
            cell_px: 4,
            frames: 4,
            samples_per_domain: 640,
            min_objects: 2,
            max_objects: 5,
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn image_side(&self) -> usize {
        self.grid * self.cell_px
    }
}

/// The closed word set shared by all domains.
pub fn build_vocab(grid: usize) -> Vocab {
    let mut words: Vec<String> = Vec::new();
    for (name, _) in COLORS {
        words.push(name.to_string());
    }
    for s in SHAPES {
        words.push(s.to_string());
    }
    for r in 0..grid {
        for c in 0..grid {
            words.push(cell_word(r, c));
        }
    }
    for w in ["color", "end", "touch", "pick", "place", "?"] {
        words.push(w.to_string());
    }
    Vocab::from_words(words)
}

pub fn cell_word(row: usize, col: usize) -> String {
    format!("r{row}c{col}")
}

fn corner_cells(grid: usize) -> [(usize, usize); 4] {
    let last = grid - 1;
    [(0, 0), (0, last), (last, 0), (last, last)]
}

/// Deterministic scene from a seed: at least two objects, exactly one
/// actor trajectory, exactly one object on the trajectory with a shape
/// unique in the scene.
pub fn generate_scene(seed: u64, cfg: &DataConfig) -> SceneSpec {
    let mut rng = crate::Rng::seed_from(seed ^ 0x5CE9E5EED);
    let grid = cfg.grid;
    let actor_color = rng.below(ACTOR_COLORS);

    // backward random walk from a uniformly chosen corner
    let corners = corner_cells(grid);
    let end = corners[rng.below(4)];
    let mut trajectory = vec![end];
    while trajectory.len() < cfg.frames {
        let (r, c) = *trajectory.last().unwrap();
        let mut moves: Vec<(usize, usize)> = Vec::with_capacity(4);
        if r > 0 {
            moves.push((r - 1, c));
        }
        if r + 1 < grid {
            moves.push((r + 1, c));
        }
        if c > 0 {
            moves.push((r, c - 1));
        }
        if c + 1 < grid {
            moves.push((r, c + 1));
        }
        trajectory.push(moves[rng.below(moves.len())]);
    }
    trajectory.reverse();

    // the touched object sits on a trajectory cell; its shape is unique
    let touched_shape = ShapeKind::from_index(rng.below(SHAPES.len()));
    let touched_cell = trajectory[rng.below(trajectory.len())];
    let mut objects = vec![SceneObject {
        shape: touched_shape,
        color: rng.below(COLORS.len()),
        cell: touched_cell,
    }];

    let extra = cfg.min_objects - 1 + rng.below(cfg.max_objects - cfg.min_objects + 1);
    for _ in 0..extra {
        // off-trajectory free cell
        let cell = loop {
            let cand = (rng.below(grid), rng.below(grid));
            let on_trajectory = trajectory.contains(&cand);
            let occupied = objects.iter().any(|o| o.cell == cand);
            if !on_trajectory && !occupied {
                break cand;
            }
        };
        // any shape except the touched one, keeping the touched shape unique
        let shape = loop {
            let cand = ShapeKind::from_index(rng.below(SHAPES.len()));
            if cand != touched_shape {
                break cand;
            }
        };
        objects.push(SceneObject {
            shape,
            color: rng.below(COLORS.len()),
            cell,
        });
    }

    SceneSpec {
        seed,
        grid,
        cell_px: cfg.cell_px,
        objects,
        actor_color,
        trajectory,
        touched: 0,
    }
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn render_base(spec: &SceneSpec) -> Video {
    let side = spec.grid * spec.cell_px;
    let frames = spec.trajectory.len();
    let mut video = Video::zeros(frames, 3, side);
    video.pixels.fill(BACKGROUND);
    for t in 0..frames {
        for obj in &spec.objects {
            let rgb = COLORS[obj.color].1;
            let (row, col) = obj.cell;
            for dy in 0..spec.cell_px {
                for dx in 0..spec.cell_px {
                    if obj.shape.covers(dy, dx, spec.cell_px) {
                        for (c, &v) in rgb.iter().enumerate() {
                            *video.pixel_mut(t, c, row * spec.cell_px + dy, col * spec.cell_px + dx) =
                                v * OBJECT_DIM;
                        }
                    }
                }
            }
        }
        // actor: full-brightness solid fill drawn on top
        let (ar, ac) = spec.trajectory[t];
        let rgb = COLORS[spec.actor_color].1;
        for dy in 0..spec.cell_px {
            for dx in 0..spec.cell_px {
                for (c, &v) in rgb.iter().enumerate() {
                    *video.pixel_mut(t, c, ar * spec.cell_px + dy, ac * spec.cell_px + dx) = v;
                }
            }
        }
    }
    video
}

fn view_shift(spec: &SceneSpec, base: &Video) -> Video {
    // crop a 2x2-cell window centered on the actor's cell (zero padding
    // outside the image), then upscale 2x nearest-neighbor
    let side = base.side;
    let window = 2 * spec.cell_px;
    let mut out = Video::zeros(base.frames, base.channels, side);
    for t in 0..base.frames {
        let (ar, ac) = spec.trajectory[t];
        let top = ar as i64 * spec.cell_px as i64 - (spec.cell_px / 2) as i64;
        let left = ac as i64 * spec.cell_px as i64 - (spec.cell_px / 2) as i64;
        for c in 0..base.channels {
            for wy in 0..window {
                for wx in 0..window {
                    let sy = top + wy as i64;
                    let sx = left + wx as i64;
                    let v = if sy >= 0 && sy < side as i64 && sx >= 0 && sx < side as i64 {
                        base.pixel(t, c, sy as usize, sx as usize)
                    } else {
                        0.0
                    };
                    for uy in 0..2 {
                        for ux in 0..2 {
                            *out.pixel_mut(t, c, wy * 2 + uy, wx * 2 + ux) = v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn modality_shift(base: &Video) -> Video {
    let mut out = base.clone();
    for t in 0..base.frames {
        for y in 0..base.side {
            for x in 0..base.side {
                let rgb = [
                    base.pixel(t, 0, y, x),
                    base.pixel(t, 1, y, x),
                    base.pixel(t, 2, y, x),
                ];
                let depth = 1.0 - luminance(rgb);
                for c in 0..3 {
                    *out.pixel_mut(t, c, y, x) = depth;
                }
            }
        }
    }
    out
}

/// Render a scene under a domain transform. Pixels stay in `[0, 1]`.
pub fn render(spec: &SceneSpec, transform: DomainTransform) -> Video {
    let base = render_base(spec);
    match transform {
        DomainTransform::Identity | DomainTransform::TaskShift => base,
        DomainTransform::ViewShift => view_shift(spec, &base),
        DomainTransform::ModalityShift => modality_shift(&base),
    }
}

fn answer_words(spec: &SceneSpec, family: QuestionFamily) -> Vec<String> {
    match family {
        QuestionFamily::ActorColor => vec![COLORS[spec.actor_color].0.to_string()],
        QuestionFamily::EndCell => {
            let (r, c) = *spec.trajectory.last().unwrap();
            vec![cell_word(r, c)]
        }
        QuestionFamily::TouchedShape => vec![spec.objects[spec.touched].shape.word().to_string()],
        QuestionFamily::PickPlace => {
            let (sr, sc) = spec.trajectory[0];
            let (er, ec) = *spec.trajectory.last().unwrap();
            vec![cell_word(sr, sc), cell_word(er, ec)]
        }
    }
}

fn scene_seed(cfg: &DataConfig, index: u64) -> u64 {
    cfg.seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0x2545_F491_4F6C_DD1D))
}

fn build_sample(
    cfg: &DataConfig,
    vocab: &Vocab,
    index: u64,
    family: QuestionFamily,
    transform: DomainTransform,
    domain: &str,
    split: Split,
) -> QASample {
    let spec = generate_scene(scene_seed(cfg, index), cfg);
    let video = render(&spec, transform);
    let mut question = vec![vocab.bos()];
    question.extend(
        family
            .question_words()
            .iter()
            .map(|w| vocab.id(w).expect("question word in vocab")),
    );
    let answer = answer_words(&spec, family)
        .iter()
        .map(|w| vocab.id(w).expect("answer word in vocab"))
        .collect();
    QASample {
        video,
        question,
        answer,
        domain: domain.to_string(),
        family,
        pair_id: index,
        split,
    }
}

/// Per-family benchmark of `n` samples with an interleaved 80/20 split
/// (every fifth sample held out) and per-sample scene seeds.
pub fn make_benchmark(
    n: usize,
    transform: DomainTransform,
    family: QuestionFamily,
    cfg: &DataConfig,
    vocab: &Vocab,
    domain: &str,
) -> Result<Benchmark, DataError> {
    if n < MIN_BENCHMARK_SAMPLES {
        return Err(DataError::TooSmall {
            n,
            min: MIN_BENCHMARK_SAMPLES,
        });
    }
    let samples = (0..n)
        .map(|i| {
            let split = if i % 5 == 4 { Split::Eval } else { Split::Train };
            build_sample(cfg, vocab, i as u64, family, transform, domain, split)
        })
        .collect();
    Ok(Benchmark {
        name: format!("{}/{}", domain, family.name()),
        family,
        transform,
        samples,
    })
}

/// Question families evaluated in a perception domain.
pub const PERCEPTION_FAMILIES: [QuestionFamily; 3] = [
    QuestionFamily::ActorColor,
    QuestionFamily::EndCell,
    QuestionFamily::TouchedShape,
];

/// A full domain: benchmarks grouped by family over a shared sample pool.
/// Sample `i` is assigned family `i % 3` (or pick-place under task shift)
/// and held out when `i % 5 == 4`, so the default 640 samples give exactly
/// 512 train and 128 eval.
pub fn make_domain(
    cfg: &DataConfig,
    transform: DomainTransform,
    vocab: &Vocab,
    domain: &str,
) -> Vec<Benchmark> {
    let families: &[QuestionFamily] = if transform == DomainTransform::TaskShift {
        &[QuestionFamily::PickPlace]
    } else {
        &PERCEPTION_FAMILIES
    };
    let mut benchmarks: Vec<Benchmark> = families
        .iter()
        .map(|f| Benchmark {
            name: format!("{}/{}", domain, f.name()),
            family: *f,
            transform,
            samples: Vec::new(),
        })
        .collect();
    for i in 0..cfg.samples_per_domain {
        let f = i % families.len();
        let split = if i % 5 == 4 { Split::Eval } else { Split::Train };
        benchmarks[f].samples.push(build_sample(
            cfg,
            vocab,
            i as u64,
            families[f],
            transform,
            domain,
            split,
        ));
    }
    benchmarks
}

/// Paired source/target datasets: sample `i` of each side shares scene
/// content (same scene seed, same pair id).
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source: Vec<Benchmark>,
    pub target: Vec<Benchmark>,
    pub transform: DomainTransform,
}

pub fn make_domain_pair(cfg: &DataConfig, transform: DomainTransform, vocab: &Vocab) -> DomainPair {
    DomainPair {
        source: make_domain(cfg, DomainTransform::Identity, vocab, "source"),
        target: make_domain(cfg, transform, vocab, "target"),
        transform,
    }
}

/// All training samples of a domain, ordered by pair id.
pub fn train_pool(benchmarks: &[Benchmark]) -> Vec<&QASample> {
    let mut pool: Vec<&QASample> = benchmarks
        .iter()
        .flat_map(|b| b.train())
        .collect();
    pool.sort_by_key(|s| s.pair_id);
    pool
}

// ── Dataset directory format ─────────────────────────────────────────
//
// <dir>/manifest.json        version, benchmark layout, sample metadata
// <dir>/samples/s_NNNNN.bin  one binary pixel tensor per sample (f64 LE,
//                            [T][C][H][W] row-major)

const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SampleManifest {
    file: String,
    pair_id: u64,
    domain: String,
    family: QuestionFamily,
    split: Split,
    question: Vec<usize>,
    answer: Vec<usize>,
    frames: usize,
    channels: usize,
    side: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchmarkManifest {
    name: String,
    family: QuestionFamily,
    transform: DomainTransform,
    samples: Vec<SampleManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    benchmarks: Vec<BenchmarkManifest>,
}

pub fn save_dataset(dir: &std::path::Path, benchmarks: &[Benchmark]) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io(e.to_string());
    let samples_dir = dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(io)?;
    let mut counter = 0usize;
    let mut manifest = DatasetManifest {
        version: DATASET_VERSION,
        benchmarks: Vec::new(),
    };
    for bench in benchmarks {
        let mut bm = BenchmarkManifest {
            name: bench.name.clone(),
            family: bench.family,
            transform: bench.transform,
            samples: Vec::new(),
        };
        for s in &bench.samples {
            let file = format!("s_{counter:05}.bin");
            counter += 1;
            let bytes: Vec<u8> = s.video.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(samples_dir.join(&file), bytes).map_err(io)?;
            bm.samples.push(SampleManifest {
                file,
                pair_id: s.pair_id,
                domain: s.domain.clone(),
                family: s.family,
                split: s.split,
                question: s.question.clone(),
                answer: s.answer.clone(),
                frames: s.video.frames,
                channels: s.video.channels,
                side: s.video.side,
            });
        }
        manifest.benchmarks.push(bm);
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Io(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json).map_err(io)
}

pub fn load_dataset(dir: &std::path::Path) -> Result<Vec<Benchmark>, DataError> {
    let io = |e: std::io::Error| DataError::Io(e.to_string());
    let json = std::fs::read_to_string(dir.join("manifest.json")).map_err(io)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&json).map_err(|e| DataError::Format(e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(DataError::Format(format!(
            "unsupported dataset version {}",
            manifest.version
        )));
    }
    let mut benchmarks = Vec::with_capacity(manifest.benchmarks.len());
    for bm in manifest.benchmarks {
        let mut samples = Vec::with_capacity(bm.samples.len());
        for sm in bm.samples {
            let bytes = std::fs::read(dir.join("samples").join(&sm.file)).map_err(io)?;
            let expected = sm.frames * sm.channels * sm.side * sm.side * 8;
            if bytes.len() != expected {
                return Err(DataError::Format(format!(
                    "{}: expected {expected} bytes, found {}",
                    sm.file,
                    bytes.len()
                )));
            }
            let pixels: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            samples.push(QASample {
                video: Video {
                    frames: sm.frames,
                    channels: sm.channels,
                    side: sm.side,
                    pixels,
                },
                question: sm.question,
                answer: sm.answer,
                domain: sm.domain,
                family: sm.family,
                pair_id: sm.pair_id,
                split: sm.split,
            });
        }
        benchmarks.push(Benchmark {
            name: bm.name,
            family: bm.family,
            transform: bm.transform,
            samples,
        });
    }
    Ok(benchmarks)
}
