//! Synthetic full-way K-shot episodes.
//!
//! Each class owns a fixed mean drawn uniformly on a sphere; samples are
//! isotropic Gaussians around it. Background RoIs come from a broad
//! zero-centred Gaussian. Novel classes only ever expose a fixed pool of
//! `novel_shots` support samples, drawn once per generator.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};
use crate::numkernel::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    FineTune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub base_class_count: usize,
    pub novel_class_count: usize,
    /// Per-class sample budget for base classes.
    pub base_shots: usize,
    /// Size of the fixed per-class pool for novel classes.
    pub novel_shots: usize,
    pub raw_dim: usize,
    pub class_mean_radius: f64,
    pub within_class_std: f64,
    pub background_std: f64,
    pub include_background: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            base_class_count: 5,
            novel_class_count: 5,
            base_shots: 1000,
            novel_shots: 3,
            raw_dim: 16,
            class_mean_radius: 4.0,
            within_class_std: 1.5,
            background_std: 3.0,
            include_background: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DrlError::Config(msg));
        if self.raw_dim < 2 {
            return bad(format!("raw_dim must be >= 2, got {}", self.raw_dim));
        }
        if self.base_class_count == 0 {
            return bad("base_class_count must be >= 1".into());
        }
        if !(self.class_mean_radius > 0.0 && self.class_mean_radius.is_finite()) {
            return bad(format!(
                "class_mean_radius must be positive so class means differ, got {}",
                self.class_mean_radius
            ));
        }
        if !(self.within_class_std >= 0.0 && self.within_class_std.is_finite()) {
            return bad(format!("within_class_std must be >= 0, got {}", self.within_class_std));
        }
        if !(self.background_std >= 0.0 && self.background_std.is_finite()) {
            return bad(format!("background_std must be >= 0, got {}", self.background_std));
        }
        if self.novel_shots < 1 || self.base_shots < self.novel_shots {
            return bad(format!(
                "need base_shots >= novel_shots >= 1, got {} and {}",
                self.base_shots, self.novel_shots
            ));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.base_class_count + self.novel_class_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSample {
    pub raw: Vec<f64>,
    /// Episode-local class in `1..=C`.
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRoI {
    pub raw: Vec<f64>,
    /// `0` is background; `1..=C` are the episode's classes.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Global class ids, in episode-local order.
    pub class_ids: Vec<usize>,
    pub shots: usize,
    /// Class-major, shot-minor.
    pub support: Vec<SupportSample>,
    pub queries: Vec<QueryRoI>,
    pub stage: Stage,
    pub include_background: bool,
}

impl Episode {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Width of a probability row: `C + 1` with background, `C` without.
    pub fn width(&self) -> usize {
        self.num_classes() + usize::from(self.include_background)
    }

    pub fn node_count(&self) -> usize {
        self.support.len() + self.queries.len()
    }

    /// Column of a probability row that holds `label`.
    pub fn slot(&self, label: usize) -> usize {
        if self.include_background {
            label
        } else {
            label - 1
        }
    }

    pub fn support_raws(&self) -> Matrix {
        rows_to_matrix(self.support.iter().map(|s| &s.raw))
    }

    pub fn query_raws(&self) -> Matrix {
        rows_to_matrix(self.queries.iter().map(|q| &q.raw))
    }

    /// Support labels as probability-row slots.
    pub fn support_slots(&self) -> Vec<usize> {
        self.support.iter().map(|s| self.slot(s.class_id)).collect()
    }

    /// Query labels as probability-row slots.
    pub fn query_slots(&self) -> Vec<usize> {
        self.queries.iter().map(|q| self.slot(q.label)).collect()
    }

    /// Checks the structural invariants of a full-way episode.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c == 0 || self.shots == 0 || self.queries.is_empty() {
            return Err(DrlError::Precondition("episode needs classes, shots and queries".into()));
        }
        if self.support.len() != c * self.shots {
            return Err(DrlError::Precondition(format!(
                "expected {} support samples, found {}",
                c * self.shots,
                self.support.len()
            )));
        }
        for (i, s) in self.support.iter().enumerate() {
            if s.class_id != i / self.shots + 1 {
                return Err(DrlError::Precondition(format!("support sample {i} out of class-major order")));
            }
        }
        for q in &self.queries {
            let lo = usize::from(!self.include_background);
            if q.label < lo || q.label > c {
                return Err(DrlError::Label {
                    label: q.label,
                    width: c + 1,
                });
            }
        }
        Ok(())
    }
}

fn rows_to_matrix<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> Matrix {
    let rows: Vec<Vec<f64>> = rows.cloned().collect();
    Matrix::from_rows(&rows).expect("episode rows share raw_dim")
}

#[derive(Debug, Clone)]
pub struct EpisodeGenerator {
    spec: DatasetSpec,
    class_means: Vec<Vec<f64>>,
    /// `novel_pool[i]` holds the `novel_shots` samples of novel class `i`.
    novel_pool: Vec<Vec<Vec<f64>>>,
}

impl EpisodeGenerator {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::stream(spec.seed, 0xDA7A);
        let class_means: Vec<Vec<f64>> = (0..spec.total_classes())
            .map(|_| {
                let mut v: Vec<f64> = (0..spec.raw_dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x *= spec.class_mean_radius / norm);
                v
            })
            .collect();
        let mut generator = Self {
            spec,
            class_means,
            novel_pool: Vec::new(),
        };
        generator.novel_pool = (0..generator.spec.novel_class_count)
            .map(|i| {
                let class = generator.spec.base_class_count + i;
                (0..generator.spec.novel_shots)
                    .map(|_| generator.draw(class, &mut rng))
                    .collect()
            })
            .collect();
        Ok(generator)
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    /// Classes taking part in episodes of `stage`.
    pub fn stage_classes(&self, stage: Stage) -> Vec<usize> {
        match stage {
            Stage::Base => (0..self.spec.base_class_count).collect(),
            Stage::FineTune => (0..self.spec.total_classes()).collect(),
        }
    }

    fn draw(&self, class: usize, rng: &mut Rng) -> Vec<f64> {
        let std = self.spec.within_class_std;
        self.class_means[class].iter().map(|m| m + std * rng.normal()).collect()
    }

    fn draw_background(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.spec.raw_dim)
            .map(|_| self.spec.background_std * rng.normal())
            .collect()
    }

    fn is_novel(&self, class: usize) -> bool {
        class >= self.spec.base_class_count
    }

    pub fn sample_episode(&self, stage: Stage, shots: usize, n_roi: usize, rng: &mut Rng) -> Result<Episode> {
        if shots == 0 || n_roi == 0 {
            return Err(DrlError::Precondition(format!(
                "shots and n_roi must be >= 1, got {shots} and {n_roi}"
            )));
        }
        let budget = match stage {
            Stage::Base => self.spec.base_shots,
            Stage::FineTune => self.spec.novel_shots,
        };
        if shots > budget {
            return Err(DrlError::Budget {
                requested: shots,
                available: budget,
            });
        }
        let class_ids = self.stage_classes(stage);
        let mut support = Vec::with_capacity(class_ids.len() * shots);
        for (local, &class) in class_ids.iter().enumerate() {
            if self.is_novel(class) {
                let pool = &self.novel_pool[class - self.spec.base_class_count];
                for idx in rng.choose_distinct(pool.len(), shots) {
                    support.push(SupportSample {
                        raw: pool[idx].clone(),
                        class_id: local + 1,
                    });
                }
            } else {
                for _ in 0..shots {
                    support.push(SupportSample {
                        raw: self.draw(class, rng),
                        class_id: local + 1,
                    });
                }
            }
        }
        let c = class_ids.len();
        let queries = (0..n_roi)
            .map(|_| {
                let label = if self.spec.include_background {
                    rng.index(c + 1)
                } else {
                    1 + rng.index(c)
                };
                let raw = if label == 0 {
                    self.draw_background(rng)
                } else {
                    self.draw(class_ids[label - 1], rng)
                };
                QueryRoI { raw, label }
            })
            .collect();
        Ok(Episode {
            class_ids,
            shots,
            support,
            queries,
            stage,
            include_background: self.spec.include_background,
        })
    }
}

/// Writes one JSON episode per line.
pub fn write_episodes_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_episodes_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut episodes = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line)?;
        ep.validate()?;
        episodes.push(ep);
    }
    Ok(episodes)
}
